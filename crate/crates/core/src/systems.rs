//! The three dynamical levels and the maps between them: the full stiff
//! system in original and action–angle coordinates, the homogenized
//! (leading-order) system, and the coupled second-order averaged system
//! with its closed-form oscillatory corrections.

use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorConfig, Trajectory};
use crate::model::ModelSpec;

/// Original phase-space point: slow positions/velocities and fast
/// positions/velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub y: Vec<f64>,
    pub ydot: Vec<f64>,
    pub z: Vec<f64>,
    pub zdot: Vec<f64>,
}

/// Action–angle phase-space point: fast angles and actions, slow positions
/// and (transformed) momenta.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedState {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub y: Vec<f64>,
    pub p: Vec<f64>,
}

/// State of the coupled slow system: leading-order variables plus the
/// averaged second-order corrections, integrated jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowState {
    pub y0: Vec<f64>,
    pub p0: Vec<f64>,
    pub phi0: Vec<f64>,
    pub ybar2: Vec<f64>,
    pub pbar2: Vec<f64>,
    pub phibar2: Vec<f64>,
}

/// Closed-form oscillatory corrections evaluated at one slow state, plus
/// the averaged second-order action.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionTerms {
    pub theta1_osc: Vec<f64>,
    pub phi2_osc: Vec<f64>,
    pub y2_osc: Vec<f64>,
    pub p2_osc: Vec<f64>,
    pub theta2_osc: Vec<f64>,
    pub thetabar2: Vec<f64>,
}

/// Initial data for the averaged second-order system, all independent of
/// the scale separation parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderInit {
    pub ybar2_0: Vec<f64>,
    pub pbar2_0: Vec<f64>,
    pub phibar2_0: Vec<f64>,
    /// Integration constants of the closed-form averaged action.
    pub c_theta: Vec<f64>,
}

/// Default resonance-gap tolerance derived from the frequency floor.
pub fn default_resonance_tol(model: &ModelSpec) -> f64 {
    1e-3 * model.omega_floor
}

// ---------------------------------------------------------------------------
// Derivative data of V, omega, L = log omega at one point
// ---------------------------------------------------------------------------

/// Values, gradients and Hessians of the potential, all frequencies, and
/// their logarithms at a single slow point. Reused across calls to avoid
/// allocation in integration loops.
pub(crate) struct SlowCoeffs {
    n: usize,
    r: usize,
    pub v: f64,
    pub dv: Vec<f64>,
    pub ddv: Vec<f64>,
    pub w: Vec<f64>,
    pub dw: Vec<f64>,
    pub ddw: Vec<f64>,
    pub dl: Vec<f64>,
    pub ddl: Vec<f64>,
    scratch: Vec<f64>,
}

impl SlowCoeffs {
    pub fn new(model: &ModelSpec) -> SlowCoeffs {
        let (n, r) = (model.n, model.r);
        SlowCoeffs {
            n,
            r,
            v: 0.0,
            dv: vec![0.0; n],
            ddv: vec![0.0; n * n],
            w: vec![0.0; r],
            dw: vec![0.0; r * n],
            ddw: vec![0.0; r * n * n],
            dl: vec![0.0; r * n],
            ddl: vec![0.0; r * n * n],
            scratch: Vec::new(),
        }
    }

    pub fn compute(&mut self, model: &ModelSpec, y: &[f64]) -> Result<()> {
        let (n, r) = (self.n, self.r);
        self.v = model.v_jet2_into(y, &mut self.scratch, &mut self.dv, &mut self.ddv)?;
        for lam in 0..r {
            let (grad, hess) = (
                &mut self.dw[lam * n..(lam + 1) * n],
                &mut self.ddw[lam * n * n..(lam + 1) * n * n],
            );
            self.w[lam] = model.omega_jet2_into(lam, y, &mut self.scratch, grad, hess)?;
        }
        // L = log omega: DL = Dw/w, D^2 L = D^2 w / w - (Dw ⊗ Dw)/w^2.
        for lam in 0..r {
            let w = self.w[lam];
            let inv = 1.0 / w;
            for j in 0..n {
                self.dl[lam * n + j] = self.dw[lam * n + j] * inv;
            }
            for j in 0..n {
                for k in 0..n {
                    self.ddl[lam * n * n + j * n + k] = self.ddw[lam * n * n + j * n + k] * inv
                        - self.dw[lam * n + j] * self.dw[lam * n + k] * inv * inv;
                }
            }
        }
        Ok(())
    }

    pub fn dw_row(&self, lam: usize) -> &[f64] {
        &self.dw[lam * self.n..(lam + 1) * self.n]
    }

    pub fn dl_row(&self, lam: usize) -> &[f64] {
        &self.dl[lam * self.n..(lam + 1) * self.n]
    }

    pub fn ddw_entry(&self, lam: usize, j: usize, k: usize) -> f64 {
        self.ddw[lam * self.n * self.n + j * self.n + k]
    }

    pub fn ddl_entry(&self, lam: usize, j: usize, k: usize) -> f64 {
        self.ddl[lam * self.n * self.n + j * self.n + k]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Full system
// ---------------------------------------------------------------------------

impl FullState {
    /// Initial state: slow data from the model, fast positions zero, fast
    /// velocities from the initial fast momenta.
    pub fn initial(model: &ModelSpec) -> FullState {
        FullState {
            y: model.y_star.clone(),
            ydot: model.p_star.clone(),
            z: vec![0.0; model.r],
            zdot: model.u_star.clone(),
        }
    }
}

/// Time derivative of the full system:
/// `ddot y^j = -D_j V - eps^{-2} sum_lam omega_lam D_j omega_lam z_lam^2`,
/// `ddot z = -eps^{-2} omega^2 z`.
/// The returned `FullState` holds the derivative of each field.
pub fn full_rhs(model: &ModelSpec, _t: f64, state: &FullState, eps: f64) -> Result<FullState> {
    let (n, r) = (model.n, model.r);
    let mut scratch = Vec::new();
    let mut dv = vec![0.0; n];
    model.v_grad(&state.y, &mut scratch, &mut dv)?;
    let mut yddot = vec![0.0; n];
    let mut zddot = vec![0.0; r];
    let inv_eps2 = 1.0 / (eps * eps);
    let mut dw = vec![0.0; n];
    for j in 0..n {
        yddot[j] = -dv[j];
    }
    for lam in 0..r {
        let w = model.omega_grad(lam, &state.y, &mut scratch, &mut dw)?;
        let z2 = state.z[lam] * state.z[lam];
        for j in 0..n {
            yddot[j] -= inv_eps2 * w * dw[j] * z2;
        }
        zddot[lam] = -inv_eps2 * w * w * state.z[lam];
    }
    Ok(FullState {
        y: state.ydot.clone(),
        ydot: yddot,
        z: state.zdot.clone(),
        zdot: zddot,
    })
}

/// Conserved total energy
/// `E = |ydot|^2/2 + |zdot|^2/2 + V(y) + eps^{-2} sum omega^2 z^2 / 2`.
pub fn full_energy(model: &ModelSpec, state: &FullState, eps: f64) -> Result<f64> {
    let mut scratch = Vec::new();
    let mut e = 0.5 * dot(&state.ydot, &state.ydot) + 0.5 * dot(&state.zdot, &state.zdot);
    e += model.v_value(&state.y, &mut scratch)?;
    let inv_eps2 = 1.0 / (eps * eps);
    for lam in 0..model.r {
        let w = model.omega_value(lam, &state.y, &mut scratch)?;
        e += 0.5 * inv_eps2 * w * w * state.z[lam] * state.z[lam];
    }
    Ok(e)
}

/// Integrates the full system over `[0, t_end]`. Row layout:
/// `[y, z, ydot, zdot]`.
pub fn run_full(
    model: &ModelSpec,
    eps: f64,
    t_end: f64,
    dt: f64,
    output_stride: usize,
) -> Result<Trajectory> {
    let (n, r) = (model.n, model.r);
    let init = FullState::initial(model);
    let mut q0 = init.y.clone();
    q0.extend_from_slice(&init.z);
    let mut p0 = init.ydot.clone();
    p0.extend_from_slice(&init.zdot);

    let inv_eps2 = 1.0 / (eps * eps);
    let mut scratch = Vec::new();
    let mut dv = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let model_ref = model;
    let mut rhs_q = |_t: f64, _q: &[f64], p: &[f64], out: &mut [f64]| {
        out.copy_from_slice(p);
        Ok(())
    };
    let mut rhs_p = move |_t: f64, q: &[f64], _p: &[f64], out: &mut [f64]| {
        let (y, z) = q.split_at(n);
        model_ref.v_grad(y, &mut scratch, &mut dv)?;
        for j in 0..n {
            out[j] = -dv[j];
        }
        for lam in 0..r {
            let w = model_ref.omega_grad(lam, y, &mut scratch, &mut dw)?;
            let z2 = z[lam] * z[lam];
            for j in 0..n {
                out[j] -= inv_eps2 * w * dw[j] * z2;
            }
            out[n + lam] = -inv_eps2 * w * w * z[lam];
        }
        Ok(())
    };

    let cfg = IntegratorConfig::new(dt).with_stride(output_stride);
    let mut traj = integrate(&mut rhs_q, &mut rhs_p, 0.0, &q0, &p0, &cfg, t_end)?;
    traj.labels = (0..n)
        .map(|j| format!("y{}", j + 1))
        .chain((0..r).map(|l| format!("z{}", l + 1)))
        .chain((0..n).map(|j| format!("ydot{}", j + 1)))
        .chain((0..r).map(|l| format!("zdot{}", l + 1)))
        .collect();
    Ok(traj)
}

/// Extracts a [`FullState`] from a row of a [`run_full`] trajectory.
pub fn full_state_from_row(model: &ModelSpec, row: &[f64]) -> FullState {
    let (n, r) = (model.n, model.r);
    FullState {
        y: row[0..n].to_vec(),
        z: row[n..n + r].to_vec(),
        ydot: row[n + r..2 * n + r].to_vec(),
        zdot: row[2 * n + r..2 * n + 2 * r].to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Action–angle transformation
// ---------------------------------------------------------------------------

/// Maps a full state to action–angle coordinates. The angle returned is the
/// principal value; use [`AngleLift`] to unwrap along a trajectory.
pub fn to_action_angle(model: &ModelSpec, state: &FullState, eps: f64) -> Result<TransformedState> {
    let (n, r) = (model.n, model.r);
    let mut scratch = Vec::new();
    let mut dw = vec![0.0; n];
    let mut phi = vec![0.0; r];
    let mut theta = vec![0.0; r];
    let mut p = state.ydot.clone();
    for lam in 0..r {
        let w = model.omega_grad(lam, &state.y, &mut scratch, &mut dw)?;
        let z = state.z[lam];
        let zd = state.zdot[lam];
        if z == 0.0 && zd == 0.0 {
            return Err(Error::UndefinedAngle { lambda: lam + 1 });
        }
        theta[lam] = 0.5 * (zd * zd / w + w * z * z / (eps * eps));
        let psi = (w * z / eps).atan2(zd);
        phi[lam] = eps * psi;
        let s2 = (2.0 * psi).sin();
        for j in 0..n {
            p[j] -= eps * theta[lam] * dw[j] / (2.0 * w) * s2;
        }
    }
    Ok(TransformedState {
        phi,
        theta,
        y: state.y.clone(),
        p,
    })
}

/// Inverse of [`to_action_angle`]:
/// `z = eps sqrt(2 theta / omega) sin(phi/eps)`,
/// `zdot = sqrt(2 theta omega) cos(phi/eps)`.
pub fn from_action_angle(
    model: &ModelSpec,
    state: &TransformedState,
    eps: f64,
) -> Result<FullState> {
    let (n, r) = (model.n, model.r);
    let mut scratch = Vec::new();
    let mut dw = vec![0.0; n];
    let mut z = vec![0.0; r];
    let mut zdot = vec![0.0; r];
    let mut ydot = state.p.clone();
    for lam in 0..r {
        let w = model.omega_grad(lam, &state.y, &mut scratch, &mut dw)?;
        let th = state.theta[lam];
        let psi = state.phi[lam] / eps;
        z[lam] = eps * (2.0 * th / w).sqrt() * psi.sin();
        zdot[lam] = (2.0 * th * w).sqrt() * psi.cos();
        let s2 = (2.0 * psi).sin();
        for j in 0..n {
            ydot[j] += eps * th * dw[j] / (2.0 * w) * s2;
        }
    }
    Ok(FullState {
        y: state.y.clone(),
        ydot,
        z,
        zdot,
    })
}

/// Continuous unwrapping of angles across branch cuts of the principal
/// value, tracking the inner phase `phi/eps` per channel.
#[derive(Debug, Clone)]
pub struct AngleLift {
    prev_psi: Vec<f64>,
    started: bool,
}

impl AngleLift {
    pub fn new(r: usize) -> AngleLift {
        AngleLift {
            prev_psi: vec![0.0; r],
            started: false,
        }
    }

    /// Replaces each principal angle with its continuous lift.
    pub fn apply(&mut self, phi: &mut [f64], eps: f64) {
        use std::f64::consts::TAU;
        for (lam, ph) in phi.iter_mut().enumerate() {
            let psi_raw = *ph / eps;
            let psi = if self.started {
                let k = ((self.prev_psi[lam] - psi_raw) / TAU).round();
                psi_raw + k * TAU
            } else {
                psi_raw
            };
            self.prev_psi[lam] = psi;
            *ph = eps * psi;
        }
        self.started = true;
    }
}

/// Maps a [`run_full`] trajectory through the action–angle transform with
/// continuous angle lifting. Row layout: `[phi, y, theta, p]`.
pub fn map_full_to_action_angle(
    model: &ModelSpec,
    traj: &Trajectory,
    eps: f64,
) -> Result<Trajectory> {
    let (n, r) = (model.n, model.r);
    let dim = 2 * n + 2 * r;
    let mut states = Vec::with_capacity(traj.len() * dim);
    let mut lift = AngleLift::new(r);
    for i in 0..traj.len() {
        let full = full_state_from_row(model, traj.row(i));
        let mut aa = to_action_angle(model, &full, eps)?;
        lift.apply(&mut aa.phi, eps);
        states.extend_from_slice(&aa.phi);
        states.extend_from_slice(&aa.y);
        states.extend_from_slice(&aa.theta);
        states.extend_from_slice(&aa.p);
    }
    let labels = (0..r)
        .map(|l| format!("phi{}", l + 1))
        .chain((0..n).map(|j| format!("y{}", j + 1)))
        .chain((0..r).map(|l| format!("theta{}", l + 1)))
        .chain((0..n).map(|j| format!("p{}", j + 1)))
        .collect();
    Ok(Trajectory {
        times: traj.times.clone(),
        dim,
        states,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Transformed equations of motion
// ---------------------------------------------------------------------------

/// Time derivative of the action–angle system:
/// `phidot = omega + (eps/2) D_t L sin(2 phi / eps)`,
/// `thetadot = -theta D_t L cos(2 phi / eps)`,
/// `ydot^j = p^j + (eps/2) sum theta D_j L sin(2 phi / eps)`,
/// `pdot^j = -D_j V - sum theta D_j omega - (eps/2) sum theta D_t D_j L sin(2 phi / eps)`,
/// where `D_t L = <ydot, DL>` and `D_t D_j L = <ydot, row_j(D^2 L)>` use the
/// velocity computed from the third equation.
pub fn transformed_rhs(
    model: &ModelSpec,
    _t: f64,
    state: &TransformedState,
    eps: f64,
) -> Result<TransformedState> {
    let mut coeffs = SlowCoeffs::new(model);
    transformed_rhs_with(model, state, eps, &mut coeffs)
}

fn transformed_rhs_with(
    model: &ModelSpec,
    state: &TransformedState,
    eps: f64,
    coeffs: &mut SlowCoeffs,
) -> Result<TransformedState> {
    let (n, r) = (model.n, model.r);
    coeffs.compute(model, &state.y)?;

    let mut sin2 = vec![0.0; r];
    let mut cos2 = vec![0.0; r];
    for lam in 0..r {
        let a = 2.0 * state.phi[lam] / eps;
        sin2[lam] = a.sin();
        cos2[lam] = a.cos();
    }

    // Velocity first; the material derivatives below use it.
    let mut ydot = state.p.clone();
    for lam in 0..r {
        let th = state.theta[lam];
        let dl = coeffs.dl_row(lam);
        for j in 0..n {
            ydot[j] += 0.5 * eps * th * dl[j] * sin2[lam];
        }
    }

    let mut phidot = vec![0.0; r];
    let mut thetadot = vec![0.0; r];
    for lam in 0..r {
        let dtl = dot(&ydot, coeffs.dl_row(lam));
        phidot[lam] = coeffs.w[lam] + 0.5 * eps * dtl * sin2[lam];
        thetadot[lam] = -state.theta[lam] * dtl * cos2[lam];
    }

    let mut pdot = vec![0.0; n];
    for j in 0..n {
        pdot[j] = -coeffs.dv[j];
        for lam in 0..r {
            pdot[j] -= state.theta[lam] * coeffs.dw[lam * n + j];
            let dtdjl: f64 = (0..n).map(|k| ydot[k] * coeffs.ddl_entry(lam, j, k)).sum();
            pdot[j] -= 0.5 * eps * state.theta[lam] * dtdjl * sin2[lam];
        }
    }

    Ok(TransformedState {
        phi: phidot,
        theta: thetadot,
        y: ydot,
        p: pdot,
    })
}

/// Integrates the action–angle system over `[0, t_end]` from the
/// transformed initial data (`phi = 0`, `theta = theta*`, `y = y*`,
/// `p = p*`). Row layout: `[phi, y, theta, p]`.
pub fn run_transformed(
    model: &ModelSpec,
    eps: f64,
    t_end: f64,
    dt: f64,
    output_stride: usize,
) -> Result<Trajectory> {
    let (n, r) = (model.n, model.r);
    let theta_star = model.theta_star()?;
    let mut q0 = vec![0.0; r];
    q0.extend_from_slice(&model.y_star);
    let mut p0 = theta_star;
    p0.extend_from_slice(&model.p_star);

    let mut coeffs = SlowCoeffs::new(model);
    let model_ref = model;
    let mut eval = move |q: &[f64], p: &[f64]| -> Result<TransformedState> {
        let state = TransformedState {
            phi: q[0..r].to_vec(),
            y: q[r..r + n].to_vec(),
            theta: p[0..r].to_vec(),
            p: p[r..r + n].to_vec(),
        };
        transformed_rhs_with(model_ref, &state, eps, &mut coeffs)
    };
    // The partitioned integrator wants separate q/p callbacks; both reduce
    // to the same state evaluation.
    let mut rhs_q = |_t: f64, q: &[f64], p: &[f64], out: &mut [f64]| {
        let d = eval(q, p)?;
        out[0..r].copy_from_slice(&d.phi);
        out[r..r + n].copy_from_slice(&d.y);
        Ok(())
    };
    let mut coeffs2 = SlowCoeffs::new(model);
    let mut eval2 = move |q: &[f64], p: &[f64]| -> Result<TransformedState> {
        let state = TransformedState {
            phi: q[0..r].to_vec(),
            y: q[r..r + n].to_vec(),
            theta: p[0..r].to_vec(),
            p: p[r..r + n].to_vec(),
        };
        transformed_rhs_with(model_ref, &state, eps, &mut coeffs2)
    };
    let mut rhs_p = |_t: f64, q: &[f64], p: &[f64], out: &mut [f64]| {
        let d = eval2(q, p)?;
        out[0..r].copy_from_slice(&d.theta);
        out[r..r + n].copy_from_slice(&d.p);
        Ok(())
    };

    let cfg = IntegratorConfig::new(dt).with_stride(output_stride);
    let mut traj = integrate(&mut rhs_q, &mut rhs_p, 0.0, &q0, &p0, &cfg, t_end)?;
    traj.labels = (0..r)
        .map(|l| format!("phi{}", l + 1))
        .chain((0..n).map(|j| format!("y{}", j + 1)))
        .chain((0..r).map(|l| format!("theta{}", l + 1)))
        .chain((0..n).map(|j| format!("p{}", j + 1)))
        .collect();
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Homogenized system
// ---------------------------------------------------------------------------

/// Leading-order slow dynamics:
/// `y0dot = p0`, `p0dot^j = -D_j V(y0) - sum theta*_lam D_j omega_lam(y0)`.
pub fn homogenized_rhs(
    model: &ModelSpec,
    theta_star: &[f64],
    _t: f64,
    y0: &[f64],
    p0: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = model.n;
    let mut scratch = Vec::new();
    let mut dv = vec![0.0; n];
    let mut dw = vec![0.0; n];
    model.v_grad(y0, &mut scratch, &mut dv)?;
    let mut p0dot = vec![0.0; n];
    for j in 0..n {
        p0dot[j] = -dv[j];
    }
    for lam in 0..model.r {
        model.omega_grad(lam, y0, &mut scratch, &mut dw)?;
        for j in 0..n {
            p0dot[j] -= theta_star[lam] * dw[j];
        }
    }
    Ok((p0.to_vec(), p0dot))
}

/// Integrates the homogenized system with phase bookkeeping
/// (`phi0dot = omega(y0)`). Row layout: `[y0, phi0, p0]`.
pub fn run_homogenized(
    model: &ModelSpec,
    t_end: f64,
    dt: f64,
    output_stride: usize,
) -> Result<Trajectory> {
    let (n, r) = (model.n, model.r);
    let theta_star = model.theta_star()?;
    let mut q0 = model.y_star.clone();
    q0.extend_from_slice(&vec![0.0; r]);
    let p0 = model.p_star.clone();

    let mut scratch = Vec::new();
    let model_ref = model;
    let mut rhs_q = move |_t: f64, q: &[f64], p: &[f64], out: &mut [f64]| {
        out[0..n].copy_from_slice(p);
        for lam in 0..r {
            out[n + lam] = model_ref.omega_value(lam, &q[0..n], &mut scratch)?;
        }
        Ok(())
    };
    let mut scratch2 = Vec::new();
    let mut dv = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let ths = theta_star.clone();
    let mut rhs_p = move |_t: f64, q: &[f64], _p: &[f64], out: &mut [f64]| {
        let y = &q[0..n];
        model_ref.v_grad(y, &mut scratch2, &mut dv)?;
        for j in 0..n {
            out[j] = -dv[j];
        }
        for lam in 0..r {
            model_ref.omega_grad(lam, y, &mut scratch2, &mut dw)?;
            for j in 0..n {
                out[j] -= ths[lam] * dw[j];
            }
        }
        Ok(())
    };

    let cfg = IntegratorConfig::new(dt).with_stride(output_stride);
    let mut traj = integrate(&mut rhs_q, &mut rhs_p, 0.0, &q0, &p0, &cfg, t_end)?;
    traj.labels = (0..n)
        .map(|j| format!("y{}", j + 1))
        .chain((0..r).map(|l| format!("phi{}", l + 1)))
        .chain((0..n).map(|j| format!("p{}", j + 1)))
        .collect();
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Second-order averaged system
// ---------------------------------------------------------------------------

/// Closed-form averaged second-order action:
/// `thetabar2_lam = theta*_lam <p0, D omega_lam>^2 / (8 omega_lam^4) + C_lam`.
pub fn theta_bar2(model: &ModelSpec, y0: &[f64], p0: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let theta_star = model.theta_star()?;
    let mut coeffs = SlowCoeffs::new(model);
    coeffs.compute(model, y0)?;
    Ok(theta_bar2_from_coeffs(&theta_star, &coeffs, p0, c))
}

fn theta_bar2_from_coeffs(
    theta_star: &[f64],
    coeffs: &SlowCoeffs,
    p0: &[f64],
    c: &[f64],
) -> Vec<f64> {
    (0..theta_star.len())
        .map(|lam| {
            let w = coeffs.w[lam];
            let pdw = dot(p0, coeffs.dw_row(lam));
            theta_star[lam] * pdw * pdw / (8.0 * w.powi(4)) + c[lam]
        })
        .collect()
}

/// Time derivative of the coupled slow system (leading order plus averaged
/// second-order corrections). `c_theta` holds the integration constants of
/// the closed-form averaged action.
pub fn coupled_slow_rhs(
    model: &ModelSpec,
    theta_star: &[f64],
    c_theta: &[f64],
    _t: f64,
    s: &SlowState,
) -> Result<SlowState> {
    let mut coeffs = SlowCoeffs::new(model);
    coupled_slow_rhs_with(model, theta_star, c_theta, s, &mut coeffs)
}

fn coupled_slow_rhs_with(
    model: &ModelSpec,
    theta_star: &[f64],
    c_theta: &[f64],
    s: &SlowState,
    coeffs: &mut SlowCoeffs,
) -> Result<SlowState> {
    let (n, r) = (model.n, model.r);
    coeffs.compute(model, &s.y0)?;

    // Leading order.
    let y0dot = s.p0.clone();
    let mut p0dot = vec![0.0; n];
    for j in 0..n {
        p0dot[j] = -coeffs.dv[j];
        for lam in 0..r {
            p0dot[j] -= theta_star[lam] * coeffs.dw[lam * n + j];
        }
    }
    let phi0dot = coeffs.w.clone();

    // Material derivatives of L along the leading-order flow.
    let dtl: Vec<f64> = (0..r).map(|lam| dot(&s.p0, coeffs.dl_row(lam))).collect();

    let thetabar2 = theta_bar2_from_coeffs(theta_star, coeffs, &s.p0, c_theta);

    let mut phibar2dot = vec![0.0; r];
    for lam in 0..r {
        let dl = coeffs.dl_row(lam);
        phibar2dot[lam] = dot(coeffs.dw_row(lam), &s.ybar2)
            + theta_star[lam] * dot(dl, dl) / 8.0
            - dtl[lam] * dtl[lam] / (8.0 * coeffs.w[lam]);
    }

    let mut ybar2dot = vec![0.0; n];
    for j in 0..n {
        ybar2dot[j] = s.pbar2[j];
        for lam in 0..r {
            ybar2dot[j] -=
                theta_star[lam] * coeffs.dl[lam * n + j] * dtl[lam] / (4.0 * coeffs.w[lam]);
        }
    }

    let mut pbar2dot = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            acc -= s.ybar2[k] * coeffs.ddv[j * n + k];
        }
        for lam in 0..r {
            acc -= thetabar2[lam] * coeffs.dw[lam * n + j];
            for k in 0..n {
                acc -= theta_star[lam] * s.ybar2[k] * coeffs.ddw_entry(lam, j, k);
            }
            let dl = coeffs.dl_row(lam);
            let ddjl: f64 = (0..n).map(|k| dl[k] * coeffs.ddl_entry(lam, j, k)).sum();
            acc -= theta_star[lam] * theta_star[lam] * ddjl / 8.0;
            let dtdjl: f64 = (0..n).map(|k| s.p0[k] * coeffs.ddl_entry(lam, j, k)).sum();
            acc += theta_star[lam] * dtdjl * dtl[lam] / (4.0 * coeffs.w[lam]);
        }
        pbar2dot[j] = acc;
    }

    Ok(SlowState {
        y0: y0dot,
        p0: p0dot,
        phi0: phi0dot,
        ybar2: ybar2dot,
        pbar2: pbar2dot,
        phibar2: phibar2dot,
    })
}

/// Oscillatory correction terms at one slow state. The phase `phi0` enters
/// only through `cos`/`sin` of `2 phi0 / eps`; the averaged phase
/// `phibar2` from `s` feeds the second-order action correction.
pub fn correction_terms(
    model: &ModelSpec,
    s: &SlowState,
    eps: f64,
    c_theta: &[f64],
    resonance_tol: f64,
) -> Result<CorrectionTerms> {
    let theta_star = model.theta_star()?;
    let mut coeffs = SlowCoeffs::new(model);
    correction_terms_with(model, &theta_star, s, eps, c_theta, resonance_tol, &mut coeffs)
}

#[allow(clippy::too_many_arguments)]
fn correction_terms_with(
    model: &ModelSpec,
    theta_star: &[f64],
    s: &SlowState,
    eps: f64,
    c_theta: &[f64],
    resonance_tol: f64,
    coeffs: &mut SlowCoeffs,
) -> Result<CorrectionTerms> {
    let (n, r) = (model.n, model.r);
    coeffs.compute(model, &s.y0)?;

    let mut sin2 = vec![0.0; r];
    let mut cos2 = vec![0.0; r];
    let mut cos4 = vec![0.0; r];
    for lam in 0..r {
        let a = 2.0 * s.phi0[lam] / eps;
        sin2[lam] = a.sin();
        cos2[lam] = a.cos();
        cos4[lam] = (2.0 * a).cos();
    }

    let dtl: Vec<f64> = (0..r).map(|lam| dot(&s.p0, coeffs.dl_row(lam))).collect();

    let mut theta1_osc = vec![0.0; r];
    let mut phi2_osc = vec![0.0; r];
    for lam in 0..r {
        let w = coeffs.w[lam];
        theta1_osc[lam] = -theta_star[lam] * dtl[lam] / (2.0 * w) * sin2[lam];
        phi2_osc[lam] = -dtl[lam] / (4.0 * w) * cos2[lam];
    }

    let mut y2_osc = vec![0.0; n];
    let mut p2_osc = vec![0.0; n];
    for j in 0..n {
        for lam in 0..r {
            let w = coeffs.w[lam];
            y2_osc[j] -= theta_star[lam] * coeffs.dl[lam * n + j] / (4.0 * w) * cos2[lam];
            // d/dt of g_j = theta* D_j omega / (4 omega^2) along y0dot = p0:
            // grad_k g_j = theta*/4 (DD_jk omega / omega^2
            //                        - 2 D_j omega D_k omega / omega^3).
            let mut dgdt = 0.0;
            for k in 0..n {
                let grad_k = theta_star[lam] / 4.0
                    * (coeffs.ddw_entry(lam, j, k) / (w * w)
                        - 2.0 * coeffs.dw[lam * n + j] * coeffs.dw[lam * n + k] / (w * w * w));
                dgdt += s.p0[k] * grad_k;
            }
            p2_osc[j] += dgdt * cos2[lam];
        }
    }

    let mut theta2_osc = vec![0.0; r];
    for lam in 0..r {
        let w = coeffs.w[lam];
        let dl = coeffs.dl_row(lam);
        let th = theta_star[lam];

        let mut sum_mu = 0.0;
        for mu in 0..r {
            sum_mu += theta_star[mu] * dot(coeffs.dw_row(mu), dl);
        }
        let mut acc = th * sum_mu / (4.0 * w * w) * cos2[lam];

        let mut quad = 0.0;
        for j in 0..n {
            for k in 0..n {
                quad += coeffs.ddl_entry(lam, j, k) * s.p0[j] * s.p0[k];
            }
        }
        acc -= th * quad / (4.0 * w * w) * cos2[lam];
        acc += th * dtl[lam] * dtl[lam] / (4.0 * w * w) * cos2[lam];
        acc += th * th * dot(dl, dl) / (16.0 * w) * cos4[lam];
        acc -= th * dtl[lam] / w * s.phibar2[lam] * cos2[lam];
        acc += th * dot(&coeffs.dv, dl) / (4.0 * w * w) * cos2[lam];

        for mu in 0..r {
            if mu == lam {
                continue;
            }
            let gap = coeffs.w[mu] - w;
            if gap.abs() < resonance_tol {
                return Err(Error::ResonanceTooClose {
                    lambda: lam + 1,
                    mu: mu + 1,
                    gap: gap.abs(),
                    tol: resonance_tol,
                });
            }
            let coupling = th * theta_star[mu] * dot(coeffs.dl_row(mu), dl) / 8.0;
            let dphi = 2.0 * (s.phi0[mu] - s.phi0[lam]) / eps;
            let sphi = 2.0 * (s.phi0[mu] + s.phi0[lam]) / eps;
            acc += coupling * (dphi.cos() / gap + sphi.cos() / (coeffs.w[mu] + w));
        }
        theta2_osc[lam] = acc;
    }

    let thetabar2 = theta_bar2_from_coeffs(theta_star, coeffs, &s.p0, c_theta);

    Ok(CorrectionTerms {
        theta1_osc,
        phi2_osc,
        y2_osc,
        p2_osc,
        theta2_osc,
        thetabar2,
    })
}

/// Initial data of the averaged second-order system. Evaluation order is
/// fixed: the oscillatory phase correction first, then the averaged phase,
/// then the oscillatory action correction, then the action constants.
pub fn second_order_initials(model: &ModelSpec, resonance_tol: f64) -> Result<SecondOrderInit> {
    let (n, r) = (model.n, model.r);
    let theta_star = model.theta_star()?;
    let mut coeffs = SlowCoeffs::new(model);
    let mut s = SlowState {
        y0: model.y_star.clone(),
        p0: model.p_star.clone(),
        phi0: vec![0.0; r],
        ybar2: vec![0.0; n],
        pbar2: vec![0.0; n],
        phibar2: vec![0.0; r],
    };
    // eps drops out at t = 0 (phi0 = 0: all cosines are 1, sines 0), so any
    // positive value works here.
    let eps = 1.0;
    let zero_c = vec![0.0; r];
    let first =
        correction_terms_with(model, &theta_star, &s, eps, &zero_c, resonance_tol, &mut coeffs)?;
    let phibar2_0: Vec<f64> = first.phi2_osc.iter().map(|v| -v).collect();
    s.phibar2 = phibar2_0.clone();
    let second =
        correction_terms_with(model, &theta_star, &s, eps, &zero_c, resonance_tol, &mut coeffs)?;

    let mut c_theta = vec![0.0; r];
    for lam in 0..r {
        let w = coeffs.w[lam];
        let pdw = dot(&model.p_star, coeffs.dw_row(lam));
        c_theta[lam] = -theta_star[lam] * pdw * pdw / (8.0 * w.powi(4)) - second.theta2_osc[lam];
    }

    Ok(SecondOrderInit {
        ybar2_0: second.y2_osc.iter().map(|v| -v).collect(),
        pbar2_0: second.p2_osc.iter().map(|v| -v).collect(),
        phibar2_0,
        c_theta,
    })
}

/// Second-order position reconstruction `y0 + eps^2 (ybar2 + [y2])`.
pub fn reconstruct(y0: &[f64], ybar2: &[f64], y2_osc: &[f64], eps: f64) -> Vec<f64> {
    y0.iter()
        .zip(ybar2)
        .zip(y2_osc)
        .map(|((y, b), o)| y + eps * eps * (b + o))
        .collect()
}

impl SlowState {
    /// Initial slow state from the model and second-order initial data.
    pub fn initial(model: &ModelSpec, init: &SecondOrderInit) -> SlowState {
        SlowState {
            y0: model.y_star.clone(),
            p0: model.p_star.clone(),
            phi0: vec![0.0; model.r],
            ybar2: init.ybar2_0.clone(),
            pbar2: init.pbar2_0.clone(),
            phibar2: init.phibar2_0.clone(),
        }
    }

    fn from_qp(n: usize, r: usize, q: &[f64], p: &[f64]) -> SlowState {
        SlowState {
            y0: q[0..n].to_vec(),
            phi0: q[n..n + r].to_vec(),
            ybar2: q[n + r..2 * n + r].to_vec(),
            phibar2: q[2 * n + r..2 * n + 2 * r].to_vec(),
            p0: p[0..n].to_vec(),
            pbar2: p[n..2 * n].to_vec(),
        }
    }

    /// Extracts a slow state from a row of a [`run_second`] trajectory.
    pub fn from_row(model: &ModelSpec, row: &[f64]) -> SlowState {
        let (n, r) = (model.n, model.r);
        let (q, p) = row.split_at(2 * n + 2 * r);
        SlowState::from_qp(n, r, q, p)
    }
}

/// Result of integrating the coupled slow system.
pub struct SecondOrderRun {
    pub traj: Trajectory,
    pub init: SecondOrderInit,
}

/// Integrates the coupled slow system (independent of the scale separation
/// parameter). Row layout: `[y0, phi0, ybar2, phibar2, p0, pbar2]`.
pub fn run_second(
    model: &ModelSpec,
    t_end: f64,
    dt: f64,
    output_stride: usize,
    resonance_tol: f64,
) -> Result<SecondOrderRun> {
    let (n, r) = (model.n, model.r);
    let theta_star = model.theta_star()?;
    let init = second_order_initials(model, resonance_tol)?;
    let s0 = SlowState::initial(model, &init);

    let mut q0 = s0.y0.clone();
    q0.extend_from_slice(&s0.phi0);
    q0.extend_from_slice(&s0.ybar2);
    q0.extend_from_slice(&s0.phibar2);
    let mut p0 = s0.p0.clone();
    p0.extend_from_slice(&s0.pbar2);

    let model_ref = model;
    let ths = theta_star.clone();
    let cts = init.c_theta.clone();
    let mut coeffs_q = SlowCoeffs::new(model);
    let mut rhs_q = move |_t: f64, q: &[f64], p: &[f64], out: &mut [f64]| {
        let s = SlowState::from_qp(n, r, q, p);
        let d = coupled_slow_rhs_with(model_ref, &ths, &cts, &s, &mut coeffs_q)?;
        out[0..n].copy_from_slice(&d.y0);
        out[n..n + r].copy_from_slice(&d.phi0);
        out[n + r..2 * n + r].copy_from_slice(&d.ybar2);
        out[2 * n + r..2 * n + 2 * r].copy_from_slice(&d.phibar2);
        Ok(())
    };
    let ths2 = theta_star.clone();
    let cts2 = init.c_theta.clone();
    let mut coeffs_p = SlowCoeffs::new(model);
    let mut rhs_p = move |_t: f64, q: &[f64], p: &[f64], out: &mut [f64]| {
        let s = SlowState::from_qp(n, r, q, p);
        let d = coupled_slow_rhs_with(model_ref, &ths2, &cts2, &s, &mut coeffs_p)?;
        out[0..n].copy_from_slice(&d.p0);
        out[n..2 * n].copy_from_slice(&d.pbar2);
        Ok(())
    };

    let cfg = IntegratorConfig::new(dt).with_stride(output_stride);
    let mut traj = integrate(&mut rhs_q, &mut rhs_p, 0.0, &q0, &p0, &cfg, t_end)?;
    traj.labels = (0..n)
        .map(|j| format!("y0_{}", j + 1))
        .chain((0..r).map(|l| format!("phi0_{}", l + 1)))
        .chain((0..n).map(|j| format!("ybar2_{}", j + 1)))
        .chain((0..r).map(|l| format!("phibar2_{}", l + 1)))
        .chain((0..n).map(|j| format!("p0_{}", j + 1)))
        .chain((0..n).map(|j| format!("pbar2_{}", j + 1)))
        .collect();
    Ok(SecondOrderRun { traj, init })
}

/// Reconstructed second-order slow positions on the grid of a
/// [`run_second`] trajectory for a given scale separation parameter.
/// Row layout: `[y1..yn]`.
pub fn reconstruct_trajectory(
    model: &ModelSpec,
    run: &SecondOrderRun,
    eps: f64,
    resonance_tol: f64,
) -> Result<Trajectory> {
    let n = model.n;
    let theta_star = model.theta_star()?;
    let mut coeffs = SlowCoeffs::new(model);
    let mut states = Vec::with_capacity(run.traj.len() * n);
    for i in 0..run.traj.len() {
        let s = SlowState::from_row(model, run.traj.row(i));
        let corr = correction_terms_with(
            model,
            &theta_star,
            &s,
            eps,
            &run.init.c_theta,
            resonance_tol,
            &mut coeffs,
        )?;
        states.extend_from_slice(&reconstruct(&s.y0, &s.ybar2, &corr.y2_osc, eps));
    }
    Ok(Trajectory {
        times: run.traj.times.clone(),
        dim: n,
        states,
        labels: (0..n).map(|j| format!("y{}", j + 1)).collect(),
    })
}

// ---------------------------------------------------------------------------
// Resonance diagnostics
// ---------------------------------------------------------------------------

/// Outcome of scanning a slow trajectory for near-resonances of a given
/// order.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResonanceReport {
    pub order: usize,
    pub tol: f64,
    /// Smallest `|sum_lam gamma_lam omega_lam(y0(t))|` over the grid and
    /// over integer vectors with `|gamma|_1 = order`.
    pub min_gap: f64,
    /// Time at which the minimum is attained.
    pub t_min: f64,
    /// Combination attaining the minimum.
    pub gamma_min: Vec<i64>,
    pub pass: bool,
    /// For order 3: times where a combination comes within `tol` of zero,
    /// with the magnitude of its time derivative there (a small derivative
    /// signals a flat resonance).
    pub flat_crossings: Vec<(f64, f64)>,
}

// Integer vectors gamma with |gamma|_1 = order, deduplicated by requiring
// the first nonzero entry to be positive.
fn resonance_vectors(r: usize, order: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; r];
    fn go(r: usize, idx: usize, left: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if idx == r {
            if left == 0 {
                // Keep only one representative of {gamma, -gamma}.
                if cur.iter().find(|&&g| g != 0).map(|&g| g > 0).unwrap_or(false) {
                    out.push(cur.clone());
                }
            }
            return;
        }
        for mag in 0..=left {
            for sign in [1i64, -1] {
                if mag == 0 && sign < 0 {
                    continue;
                }
                cur[idx] = sign * mag;
                go(r, idx + 1, left - mag, cur, out);
            }
        }
        cur[idx] = 0;
    }
    go(r, 0, order as i64, &mut cur, &mut out);
    out
}

/// Scans slow positions for near-resonances of the given order (2 or 3).
/// `ys` holds one slow position per grid time.
pub fn check_resonance(
    model: &ModelSpec,
    times: &[f64],
    ys: &[Vec<f64>],
    order: usize,
    tol: f64,
) -> Result<ResonanceReport> {
    if times.len() != ys.len() {
        return Err(Error::GridMismatch(format!(
            "{} times but {} states",
            times.len(),
            ys.len()
        )));
    }
    let r = model.r;
    let gammas = resonance_vectors(r, order);
    let mut scratch = Vec::new();

    // Combination values per gamma per time, for the flatness diagnostic.
    let mut values = vec![vec![0.0; times.len()]; gammas.len()];
    let mut min_gap = f64::INFINITY;
    let mut t_min = times.first().copied().unwrap_or(0.0);
    let mut gamma_min = gammas.first().cloned().unwrap_or_default();
    for (i, (t, y)) in times.iter().zip(ys).enumerate() {
        let w: Vec<f64> = (0..r)
            .map(|lam| model.omega_value(lam, y, &mut scratch))
            .collect::<Result<_>>()?;
        for (g, gamma) in gammas.iter().enumerate() {
            let combo: f64 = gamma.iter().zip(&w).map(|(&gi, wi)| gi as f64 * wi).sum();
            values[g][i] = combo;
            if combo.abs() < min_gap {
                min_gap = combo.abs();
                t_min = *t;
                gamma_min = gamma.clone();
            }
        }
    }

    let mut flat_crossings = Vec::new();
    if order == 3 && times.len() >= 2 {
        for (g, vals) in values.iter().enumerate() {
            let _ = g;
            for i in 0..times.len() {
                if vals[i].abs() < tol {
                    let deriv = if i == 0 {
                        (vals[1] - vals[0]) / (times[1] - times[0])
                    } else if i == times.len() - 1 {
                        (vals[i] - vals[i - 1]) / (times[i] - times[i - 1])
                    } else {
                        (vals[i + 1] - vals[i - 1]) / (times[i + 1] - times[i - 1])
                    };
                    flat_crossings.push((times[i], deriv.abs()));
                }
            }
        }
    }

    Ok(ResonanceReport {
        order,
        tol,
        min_gap,
        t_min,
        gamma_min,
        pass: min_gap >= tol,
        flat_crossings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_model() -> ModelSpec {
        ModelSpec::builtin_test()
    }

    #[test]
    fn full_rhs_at_initial_data() {
        let m = test_model();
        let s = FullState::initial(&m);
        let d = full_rhs(&m, 0.0, &s, 0.125).unwrap();
        // z = 0 kills the stiff terms; the slow acceleration is -DV.
        assert_relative_eq!(d.ydot[0], -2.0, max_relative = 1e-14);
        assert_relative_eq!(d.ydot[1], 0.25, max_relative = 1e-14);
        assert_eq!(d.zdot, vec![0.0, 0.0]);
        assert_eq!(d.y, s.ydot);
        assert_eq!(d.z, s.zdot);
    }

    #[test]
    fn full_energy_at_initial_data() {
        let m = test_model();
        let s = FullState::initial(&m);
        for eps in [0.5, 0.125, 0.03125] {
            assert_relative_eq!(
                full_energy(&m, &s, eps).unwrap(),
                8.25125,
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn initial_data_transforms_to_reference_values() {
        let m = test_model();
        let s = FullState::initial(&m);
        let aa = to_action_angle(&m, &s, 0.125).unwrap();
        let ths = m.theta_star().unwrap();
        assert_eq!(aa.phi, vec![0.0, 0.0]);
        for lam in 0..2 {
            assert_relative_eq!(aa.theta[lam], ths[lam], max_relative = 1e-14);
        }
        assert_eq!(aa.y, m.y_star);
        for j in 0..2 {
            assert_relative_eq!(aa.p[j], m.p_star[j], max_relative = 1e-14);
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let m = test_model();
        let eps = 0.125;
        let state = FullState {
            y: vec![0.8, -0.3],
            ydot: vec![0.5, -1.1],
            z: vec![0.01, -0.007],
            zdot: vec![1.3, 0.4],
        };
        let aa = to_action_angle(&m, &state, eps).unwrap();
        let back = from_action_angle(&m, &aa, eps).unwrap();
        for (a, b) in state.y.iter().zip(&back.y) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in state.ydot.iter().zip(&back.ydot) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in state.z.iter().zip(&back.z) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in state.zdot.iter().zip(&back.zdot) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_action_maps_to_zero_fast_state() {
        let m = test_model();
        let aa = TransformedState {
            phi: vec![0.3, -0.2],
            theta: vec![0.0, 0.0],
            y: vec![1.0, -0.5],
            p: vec![1.0, 1.2],
        };
        let full = from_action_angle(&m, &aa, 0.125).unwrap();
        assert_eq!(full.z, vec![0.0, 0.0]);
        assert_eq!(full.zdot, vec![0.0, 0.0]);
        assert_eq!(full.ydot, aa.p);
    }

    #[test]
    fn initial_fast_speed_recovers_u_star() {
        let m = test_model();
        let ths = m.theta_star().unwrap();
        let aa = TransformedState {
            phi: vec![0.0, 0.0],
            theta: ths,
            y: m.y_star.clone(),
            p: m.p_star.clone(),
        };
        let full = from_action_angle(&m, &aa, 0.125).unwrap();
        for lam in 0..2 {
            assert_relative_eq!(full.zdot[lam], m.u_star[lam], max_relative = 1e-14);
        }
    }

    #[test]
    fn undefined_angle_is_reported() {
        let m = test_model();
        let s = FullState {
            y: vec![1.0, -0.5],
            ydot: vec![0.0, 0.0],
            z: vec![0.0, 0.1],
            zdot: vec![0.0, 0.0],
        };
        assert!(matches!(
            to_action_angle(&m, &s, 0.125),
            Err(Error::UndefinedAngle { lambda: 1 })
        ));
    }

    #[test]
    fn action_is_adiabatic_for_frozen_slow_coordinates() {
        // With y frozen, each fast channel is an exact harmonic oscillator
        // and its action must be constant along the orbit.
        let m = test_model();
        let eps = 0.125;
        let y = [1.0, -0.5];
        let mut scratch = Vec::new();
        let w1 = m.omega_value(0, &y, &mut scratch).unwrap();
        let amp = 0.02;
        let state_at = |t: f64| FullState {
            y: y.to_vec(),
            ydot: vec![0.0, 0.0],
            z: vec![amp * (w1 * t / eps).sin(), 0.001],
            zdot: vec![amp * w1 / eps * (w1 * t / eps).cos(), 0.0],
        };
        let th0 = to_action_angle(&m, &state_at(0.0), eps).unwrap().theta[0];
        for k in 1..20 {
            let th = to_action_angle(&m, &state_at(0.01 * k as f64), eps)
                .unwrap()
                .theta[0];
            assert!((th - th0).abs() <= 1e-12 * th0.max(1.0), "action drift");
        }
    }

    #[test]
    fn transformed_rhs_at_initial_data() {
        let m = test_model();
        let ths = m.theta_star().unwrap();
        let s = TransformedState {
            phi: vec![0.0, 0.0],
            theta: ths.clone(),
            y: m.y_star.clone(),
            p: m.p_star.clone(),
        };
        let d = transformed_rhs(&m, 0.0, &s, 0.125).unwrap();
        assert_relative_eq!(d.phi[0], 4.25, max_relative = 1e-14);
        assert_relative_eq!(d.phi[1], 2.0 + 1.0_f64.sin(), max_relative = 1e-14);
        // thetadot = -theta* <p*, DL> at phi = 0.
        let dtl1 = (1.0 * 0.5 + 1.2 * (-1.0)) / 4.25;
        assert_relative_eq!(d.theta[0], -ths[0] * dtl1, max_relative = 1e-12);
        assert_relative_eq!(d.theta[0], 0.17439446366782015, max_relative = 1e-10);
        // At phi = 0 the sin terms vanish: ydot = p, pdot matches the
        // homogenized force.
        assert_eq!(d.y, m.p_star);
        let (_, p0dot) = homogenized_rhs(&m, &ths, 0.0, &m.y_star, &m.p_star).unwrap();
        for j in 0..2 {
            assert_relative_eq!(d.p[j], p0dot[j], max_relative = 1e-13);
        }
    }

    #[test]
    fn constant_frequencies_reduce_to_slow_mechanics() {
        let m = ModelSpec::builtin_const();
        let ths = m.theta_star().unwrap();
        let s = TransformedState {
            phi: vec![0.37, -0.6],
            theta: ths,
            y: vec![0.9, -0.4],
            p: vec![0.3, 0.7],
        };
        let d = transformed_rhs(&m, 0.0, &s, 0.125).unwrap();
        assert_eq!(d.theta, vec![0.0, 0.0]);
        assert_eq!(d.y, s.p);
        let v = m.v_jet(&s.y).unwrap();
        for j in 0..2 {
            assert_relative_eq!(d.p[j], -v.gradient[j], max_relative = 1e-14);
        }
    }

    #[test]
    fn homogenized_rhs_reference_values() {
        let m = test_model();
        let ths = m.theta_star().unwrap();
        let (y0dot, p0dot) = homogenized_rhs(&m, &ths, 0.0, &m.y_star, &m.p_star).unwrap();
        assert_eq!(y0dot, m.p_star);
        let expected0 = -2.0 - ths[0] * 0.5 - ths[1] * 1.0_f64.cos();
        let expected1 = 0.25 + ths[0];
        assert_relative_eq!(p0dot[0], expected0, max_relative = 1e-13);
        assert_relative_eq!(p0dot[1], expected1, max_relative = 1e-13);
        assert_relative_eq!(p0dot[0], -2.909709, max_relative = 1e-6);
        assert_relative_eq!(p0dot[1], 1.3088235294117647, max_relative = 1e-12);
    }

    #[test]
    fn homogenized_fast_energy_matches_initial_kinetic_energy() {
        let m = test_model();
        let ths = m.theta_star().unwrap();
        let mut scratch = Vec::new();
        let u_hom: f64 = (0..2)
            .map(|lam| ths[lam] * m.omega_value(lam, &m.y_star, &mut scratch).unwrap())
            .sum();
        assert_relative_eq!(u_hom, 6.5, max_relative = 1e-14);
    }

    #[test]
    fn zero_theta_star_reduces_to_plain_mechanics() {
        let m = test_model();
        let (_, p0dot) = homogenized_rhs(&m, &[0.0, 0.0], 0.0, &m.y_star, &m.p_star).unwrap();
        assert_relative_eq!(p0dot[0], -2.0, max_relative = 1e-14);
        assert_relative_eq!(p0dot[1], 0.25, max_relative = 1e-14);
    }

    #[test]
    fn y2_correction_at_initial_data() {
        let m = test_model();
        let ths = m.theta_star().unwrap();
        let s = SlowState {
            y0: m.y_star.clone(),
            p0: m.p_star.clone(),
            phi0: vec![0.0, 0.0],
            ybar2: vec![0.0, 0.0],
            pbar2: vec![0.0, 0.0],
            phibar2: vec![0.0, 0.0],
        };
        let corr = correction_terms(&m, &s, 0.125, &[0.0, 0.0], 1e-9).unwrap();
        let w2 = 2.0 + 1.0_f64.sin();
        let dl11 = 0.5 / 4.25;
        let dl21 = 1.0_f64.cos() / w2;
        let expected = -(ths[0] * dl11 / (4.0 * 4.25) + ths[1] * dl21 / (4.0 * w2));
        assert_relative_eq!(corr.y2_osc[0], expected, max_relative = 1e-12);
        assert_relative_eq!(corr.y2_osc[0], -0.019103, max_relative = 1e-4);
        // sin(0) = 0 kills the first-order action correction.
        assert_eq!(corr.theta1_osc, vec![0.0, 0.0]);
    }

    #[test]
    fn second_order_initials_cancel_corrections() {
        let m = test_model();
        let init = second_order_initials(&m, 1e-9).unwrap();
        assert_relative_eq!(init.ybar2_0[0], 0.019103, max_relative = 1e-4);
        // Reconstruction at t = 0 returns the initial slow position
        // exactly for any eps.
        let s = SlowState::initial(&m, &init);
        for eps in [0.5, 0.125, 0.015625] {
            let corr = correction_terms(&m, &s, eps, &init.c_theta, 1e-9).unwrap();
            let y = reconstruct(&s.y0, &s.ybar2, &corr.y2_osc, eps);
            for j in 0..2 {
                assert_relative_eq!(y[j], m.y_star[j], max_relative = 1e-13);
            }
            // The closed-form averaged action starts at the negated
            // oscillatory correction.
            let tb = theta_bar2(&m, &m.y_star, &m.p_star, &init.c_theta).unwrap();
            for lam in 0..2 {
                assert_relative_eq!(tb[lam], -corr.theta2_osc[lam], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn constant_frequencies_give_zero_corrections() {
        let m = ModelSpec::builtin_const();
        let init = second_order_initials(&m, 1e-9).unwrap();
        assert_eq!(init.ybar2_0, vec![0.0, 0.0]);
        assert_eq!(init.pbar2_0, vec![0.0, 0.0]);
        assert_eq!(init.phibar2_0, vec![0.0, 0.0]);
        assert_eq!(init.c_theta, vec![0.0, 0.0]);
        let ths = m.theta_star().unwrap();
        let s = SlowState::initial(&m, &init);
        let d = coupled_slow_rhs(&m, &ths, &init.c_theta, 0.0, &s).unwrap();
        assert_eq!(d.phibar2, vec![0.0, 0.0]);
        assert_eq!(d.ybar2, s.pbar2);
        // ybar2 = pbar2 = 0 initially and the system is linear in them, so
        // they stay zero; the derivative must be zero here.
        assert_eq!(d.pbar2, vec![0.0, 0.0]);
    }

    #[test]
    fn coupled_slow_rhs_ybar2_equation() {
        let m = test_model();
        let ths = m.theta_star().unwrap();
        let init = second_order_initials(&m, 1e-9).unwrap();
        let s = SlowState::initial(&m, &init);
        let d = coupled_slow_rhs(&m, &ths, &init.c_theta, 0.0, &s).unwrap();
        // dybar2/dt = pbar2 - sum theta* D_j L D_t L / (4 omega).
        let mut expected = s.pbar2.clone();
        for lam in 0..2 {
            let l = m.log_omega_jet(lam, &m.y_star).unwrap();
            let w = m.omega_jet(lam, &m.y_star).unwrap().value;
            let dtl: f64 = m.p_star.iter().zip(&l.gradient).map(|(p, g)| p * g).sum();
            for j in 0..2 {
                expected[j] -= ths[lam] * l.gradient[j] * dtl / (4.0 * w);
            }
        }
        for j in 0..2 {
            assert_relative_eq!(d.ybar2[j], expected[j], max_relative = 1e-12);
        }
    }

    #[test]
    fn theta_bar2_closed_form_derivative_matches_ode() {
        // d/dt of the closed form along the homogenized flow must equal
        // d/dt [theta* (D_t L)^2 / (8 omega^2)], checked by finite
        // differences along an integrated leading-order trajectory.
        let m = test_model();
        let run = run_homogenized(&m, 0.5, 1e-4, 1).unwrap();
        let c = vec![0.0, 0.0];
        let n = m.n;
        let value_at = |i: usize| -> Vec<f64> {
            let row = run.row(i);
            let y0 = &row[0..n];
            let p0 = &row[n + m.r..2 * n + m.r];
            theta_bar2(&m, y0, p0, &c).unwrap()
        };
        let h = run.times[1] - run.times[0];
        let i = 2500;
        let fd: Vec<f64> = value_at(i + 1)
            .iter()
            .zip(value_at(i - 1))
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        // The right-hand side of the action ODE at the same point, also by
        // finite differences of theta* (D_t L)^2 / (8 omega^2).
        let g_at = |i: usize| -> Vec<f64> {
            let row = run.row(i);
            let y0 = &row[0..n];
            let p0 = &row[n + m.r..2 * n + m.r];
            let ths = m.theta_star().unwrap();
            (0..m.r)
                .map(|lam| {
                    let l = m.log_omega_jet(lam, y0).unwrap();
                    let w = m.omega_jet(lam, y0).unwrap().value;
                    let dtl: f64 = p0.iter().zip(&l.gradient).map(|(p, g)| p * g).sum();
                    ths[lam] * dtl * dtl / (8.0 * w * w)
                })
                .collect()
        };
        let fd_rhs: Vec<f64> = g_at(i + 1)
            .iter()
            .zip(g_at(i - 1))
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        for lam in 0..2 {
            assert!(
                (fd[lam] - fd_rhs[lam]).abs() <= 1e-8,
                "channel {lam}: {} vs {}",
                fd[lam],
                fd_rhs[lam]
            );
        }
    }

    #[test]
    fn theta_bar2_reduces_to_constant_for_orthogonal_momentum() {
        let m = test_model();
        // D omega_2 = (cos y1, 0); p0 = (0, 1) is orthogonal to it.
        let tb = theta_bar2(&m, &[1.0, -0.5], &[0.0, 1.0], &[0.25, -0.125]).unwrap();
        assert_relative_eq!(tb[1], -0.125, max_relative = 1e-14);
    }

    #[test]
    fn full_and_transformed_integrations_agree() {
        let m = test_model();
        let eps = 0.125;
        let t_end = 0.25;
        let dt = 1e-4;
        let full = run_full(&m, eps, t_end, dt, 250).unwrap();
        let aa_from_full = map_full_to_action_angle(&m, &full, eps).unwrap();
        let aa = run_transformed(&m, eps, t_end, dt, 250).unwrap();
        assert_eq!(aa.times, aa_from_full.times);
        // Compare y and theta columns; tolerance is a generous multiple of
        // the integrator error at this step size.
        let tol = 1e-5;
        for i in 0..aa.len() {
            let a = aa.row(i);
            let b = aa_from_full.row(i);
            for j in 0..aa.dim {
                let label = &aa.labels[j];
                if label.starts_with('y') || label.starts_with("theta") {
                    assert!(
                        (a[j] - b[j]).abs() <= tol,
                        "{} at t={}: {} vs {}",
                        label,
                        aa.times[i],
                        a[j],
                        b[j]
                    );
                }
            }
        }
    }

    #[test]
    fn resonance_scan_passes_on_test_model() {
        let m = test_model();
        let times = vec![0.0, 0.5, 1.0];
        let ys = vec![vec![1.0, -0.5], vec![0.8, 0.1], vec![-0.2, 0.4]];
        let rep = check_resonance(&m, &times, &ys, 2, 1e-3).unwrap();
        assert!(rep.pass);
        assert!(rep.min_gap >= 1.0); // omega1 >= 4, omega2 <= 3
    }

    #[test]
    fn identical_frequencies_fail_order_two() {
        let m = crate::model::parse_model(
            r#"{
                "name": "equal", "n": 1, "r": 2,
                "V": "y1^2", "omega": ["3", "3"],
                "y_star": [0.0], "p_star": [0.0],
                "u_star": [1.0, 1.0], "T": 1.0
            }"#,
        )
        .unwrap();
        let rep = check_resonance(&m, &[0.0], &[vec![0.0]], 2, 1e-3).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.min_gap, 0.0);
        assert_eq!(rep.gamma_min, vec![1, -1]);
    }

    #[test]
    fn single_channel_passes_vacuously() {
        let m = crate::model::parse_model(
            r#"{
                "name": "one", "n": 1, "r": 1,
                "V": "y1^2", "omega": ["3"],
                "y_star": [0.0], "p_star": [0.0],
                "u_star": [1.0], "T": 1.0
            }"#,
        )
        .unwrap();
        let rep = check_resonance(&m, &[0.0], &[vec![0.0]], 2, 1e-3).unwrap();
        assert!(rep.pass);
        assert_relative_eq!(rep.min_gap, 6.0, max_relative = 1e-14); // 2*omega1
    }

    #[test]
    fn resonance_too_close_is_refused_in_corrections() {
        let m = crate::model::parse_model(
            r#"{
                "name": "near", "n": 1, "r": 2,
                "V": "y1^2", "omega": ["3", "3.0000000001"],
                "y_star": [0.5], "p_star": [1.0],
                "u_star": [1.0, 1.0], "T": 1.0
            }"#,
        )
        .unwrap();
        let s = SlowState {
            y0: vec![0.5],
            p0: vec![1.0],
            phi0: vec![0.0, 0.0],
            ybar2: vec![0.0],
            pbar2: vec![0.0],
            phibar2: vec![0.0, 0.0],
        };
        assert!(matches!(
            correction_terms(&m, &s, 0.125, &[0.0, 0.0], 1e-3),
            Err(Error::ResonanceTooClose { .. })
        ));
    }

    #[test]
    fn fast_channel_permutation_equivariance() {
        let base = test_model();
        let swapped = crate::model::parse_model(
            r#"{
                "name": "swapped", "n": 2, "r": 2,
                "V": "0.5*y1^4 + 0.5*y2^4",
                "omega": ["2 + sin(y1)", "4 + (y1*y2)^2"],
                "y_star": [1.0, -0.5],
                "p_star": [1.0, 1.2],
                "u_star": [2.0, 3.0],
                "T": 1.0
            }"#,
        )
        .unwrap();
        let th_a = base.theta_star().unwrap();
        let th_b = swapped.theta_star().unwrap();
        assert_relative_eq!(th_a[0], th_b[1], max_relative = 1e-14);
        assert_relative_eq!(th_a[1], th_b[0], max_relative = 1e-14);

        let init_a = second_order_initials(&base, 1e-9).unwrap();
        let init_b = second_order_initials(&swapped, 1e-9).unwrap();
        for lam in 0..2 {
            assert_relative_eq!(
                init_a.c_theta[lam],
                init_b.c_theta[1 - lam],
                max_relative = 1e-12
            );
            assert_relative_eq!(
                init_a.phibar2_0[lam],
                init_b.phibar2_0[1 - lam],
                max_relative = 1e-12
            );
        }
        for j in 0..2 {
            assert_relative_eq!(init_a.ybar2_0[j], init_b.ybar2_0[j], max_relative = 1e-12);
        }
    }
}
