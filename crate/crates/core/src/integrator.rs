//! Fixed-step symplectic partitioned Runge–Kutta integration.
//!
//! The scheme pairs the 2-stage Lobatto IIIA tableau for positions with the
//! 2-stage Lobatto IIIB tableau for momenta; the implicit stage equations
//! are solved by plain fixed-point iteration.

use crate::error::{Error, Result};

/// The paired Butcher tableaux. `cA/aA/bA` advance positions (IIIA),
/// `cB/aB/bB` advance momenta (IIIB).
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherPair {
    pub c_a: [f64; 2],
    pub a_a: [[f64; 2]; 2],
    pub b_a: [f64; 2],
    pub c_b: [f64; 2],
    pub a_b: [[f64; 2]; 2],
    pub b_b: [f64; 2],
}

/// The 2-stage Lobatto IIIA/IIIB pair (trapezoidal positions, midpoint-like
/// momenta).
pub fn lobatto_pair() -> ButcherPair {
    ButcherPair {
        c_a: [0.0, 1.0],
        a_a: [[0.0, 0.0], [0.5, 0.5]],
        b_a: [0.5, 0.5],
        c_b: [0.0, 1.0],
        a_b: [[0.5, 0.0], [0.5, 0.0]],
        b_b: [0.5, 0.5],
    }
}

/// Step size and stage-solver settings.
#[derive(Debug, Clone, Copy)]
pub struct IntegratorConfig {
    pub dt: f64,
    /// Absolute residual tolerance for the fixed-point stage iteration.
    pub fp_tol: f64,
    pub fp_max_iters: usize,
    /// Record every `output_stride`-th step in the trajectory.
    pub output_stride: usize,
}

impl IntegratorConfig {
    pub fn new(dt: f64) -> IntegratorConfig {
        assert!(dt > 0.0, "step size must be positive");
        IntegratorConfig {
            dt,
            fp_tol: 1e-13,
            fp_max_iters: 100,
            output_stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> IntegratorConfig {
        assert!(stride >= 1);
        self.output_stride = stride;
        self
    }
}

/// States sampled on a uniform time grid. Rows are stored contiguously,
/// positions first, then momenta.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub dim: usize,
    /// Row-major `times.len() x dim`.
    pub states: Vec<f64>,
    pub labels: Vec<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// Column by index.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.states[i * self.dim + j]).collect()
    }

    /// Column index for a label.
    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

// Scratch for one step: stage derivatives and stage states.
struct StepScratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
    q_stage: Vec<f64>,
    p_stage: Vec<f64>,
    tmp: Vec<f64>,
}

impl StepScratch {
    fn new(nq: usize, np: usize) -> StepScratch {
        StepScratch {
            k1: vec![0.0; nq],
            k2: vec![0.0; nq],
            l1: vec![0.0; np],
            l2: vec![0.0; np],
            q_stage: vec![0.0; nq],
            p_stage: vec![0.0; np],
            tmp: vec![0.0; nq.max(np)],
        }
    }
}

// One step of the Lobatto IIIA/IIIB pair with the stage structure
//   Q1 = q,                 P1 = p + dt/2 l1,
//   Q2 = q + dt/2 (k1+k2),  P2 = P1,
//   k_i = f(t + c_i dt, Q_i, P_i),  l_i = g(t + c_i dt, Q_i, P_i),
//   q' = q + dt/2 (k1+k2),  p' = p + dt/2 (l1+l2).
// The implicit coupling is resolved by sweeping the four stage derivatives
// until the largest componentwise change falls below fp_tol.
fn step_inner<FQ, FP>(
    rhs_q: &mut FQ,
    rhs_p: &mut FP,
    t: f64,
    q: &mut [f64],
    p: &mut [f64],
    dt: f64,
    cfg: &IntegratorConfig,
    s: &mut StepScratch,
) -> Result<()>
where
    FQ: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
    FP: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
{
    let nq = q.len();
    let np = p.len();
    let h = dt;

    // Initial guess: derivatives at the current state for both stages.
    rhs_q(t, q, p, &mut s.k1)?;
    rhs_p(t, q, p, &mut s.l1)?;
    s.k2.copy_from_slice(&s.k1);
    s.l2.copy_from_slice(&s.l1);

    let mut residual = f64::INFINITY;
    for _iter in 0..cfg.fp_max_iters {
        residual = 0.0;

        // Stage 1: Q1 = q, P1 = p + h/2 l1.
        for i in 0..np {
            s.p_stage[i] = p[i] + 0.5 * h * s.l1[i];
        }
        rhs_q(t, q, &s.p_stage, &mut s.tmp[..nq])?;
        for i in 0..nq {
            residual = residual.max((s.tmp[i] - s.k1[i]).abs());
            s.k1[i] = s.tmp[i];
        }
        rhs_p(t, q, &s.p_stage, &mut s.tmp[..np])?;
        for i in 0..np {
            residual = residual.max((s.tmp[i] - s.l1[i]).abs());
            s.l1[i] = s.tmp[i];
        }

        // Stage 2: Q2 = q + h/2 (k1 + k2), P2 = p + h/2 l1.
        for i in 0..np {
            s.p_stage[i] = p[i] + 0.5 * h * s.l1[i];
        }
        for i in 0..nq {
            s.q_stage[i] = q[i] + 0.5 * h * (s.k1[i] + s.k2[i]);
        }
        rhs_q(t + h, &s.q_stage, &s.p_stage, &mut s.tmp[..nq])?;
        for i in 0..nq {
            residual = residual.max((s.tmp[i] - s.k2[i]).abs());
            s.k2[i] = s.tmp[i];
        }
        rhs_p(t + h, &s.q_stage, &s.p_stage, &mut s.tmp[..np])?;
        for i in 0..np {
            residual = residual.max((s.tmp[i] - s.l2[i]).abs());
            s.l2[i] = s.tmp[i];
        }

        if residual <= cfg.fp_tol {
            for i in 0..nq {
                q[i] += 0.5 * h * (s.k1[i] + s.k2[i]);
            }
            for i in 0..np {
                p[i] += 0.5 * h * (s.l1[i] + s.l2[i]);
            }
            return Ok(());
        }
    }
    Err(Error::FixedPointDivergence {
        t,
        residual,
        iters: cfg.fp_max_iters,
    })
}

/// Advances `(q, p)` by one step of size `cfg.dt` (negative `dt` in the
/// config steps backwards). Returns the new state.
pub fn step<FQ, FP>(
    rhs_q: &mut FQ,
    rhs_p: &mut FP,
    t: f64,
    q: &[f64],
    p: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    FQ: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
    FP: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
{
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let mut scratch = StepScratch::new(q.len(), p.len());
    step_inner(rhs_q, rhs_p, t, &mut q, &mut p, cfg.dt, cfg, &mut scratch)?;
    Ok((q, p))
}

/// Integrates from `t0` to `t_end`, sampling every `output_stride` steps.
/// `(t_end - t0) / dt` must be an integer to rounding accuracy, and the step
/// count must be divisible by `output_stride` so the final time is recorded.
pub fn integrate<FQ, FP>(
    rhs_q: &mut FQ,
    rhs_p: &mut FP,
    t0: f64,
    q0: &[f64],
    p0: &[f64],
    cfg: &IntegratorConfig,
    t_end: f64,
) -> Result<Trajectory>
where
    FQ: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
    FP: FnMut(f64, &[f64], &[f64], &mut [f64]) -> Result<()>,
{
    let span = t_end - t0;
    if span < 0.0 {
        return Err(Error::GridMismatch(format!(
            "end time {t_end} precedes start time {t0}"
        )));
    }
    let steps_f = span / cfg.dt;
    let n_steps = steps_f.round() as usize;
    if (steps_f - n_steps as f64).abs() > 1e-6 * steps_f.max(1.0) {
        return Err(Error::GridMismatch(format!(
            "span {span} is not an integer multiple of dt {}",
            cfg.dt
        )));
    }
    if n_steps % cfg.output_stride != 0 {
        return Err(Error::GridMismatch(format!(
            "step count {n_steps} is not divisible by output stride {}",
            cfg.output_stride
        )));
    }

    let nq = q0.len();
    let np = p0.len();
    let dim = nq + np;
    let n_samples = n_steps / cfg.output_stride + 1;
    let mut times = Vec::with_capacity(n_samples);
    let mut states = Vec::with_capacity(n_samples * dim);

    let mut q = q0.to_vec();
    let mut p = p0.to_vec();
    let mut scratch = StepScratch::new(nq, np);

    times.push(t0);
    states.extend_from_slice(&q);
    states.extend_from_slice(&p);

    for k in 0..n_steps {
        let t = t0 + k as f64 * cfg.dt;
        step_inner(rhs_q, rhs_p, t, &mut q, &mut p, cfg.dt, cfg, &mut scratch)?;
        if (k + 1) % cfg.output_stride == 0 {
            times.push(t0 + (k + 1) as f64 * cfg.dt);
            states.extend_from_slice(&q);
            states.extend_from_slice(&p);
        }
    }

    let labels = (0..nq)
        .map(|i| format!("q{}", i + 1))
        .chain((0..np).map(|i| format!("p{}", i + 1)))
        .collect();
    Ok(Trajectory {
        times,
        dim,
        states,
        labels,
    })
}
