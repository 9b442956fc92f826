//! Model problem definitions: slow potential, fast frequencies, and initial
//! data, with exact derivative jets evaluated from compiled expressions.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::expr::{ExprNode, Tape};
use crate::jet::Jet2;

/// A fast–slow model problem.
///
/// The slow subsystem has dimension `n` with potential `V(y)`; the fast
/// subsystem has `r` channels with frequencies `omega_lambda(y)`, each
/// required to stay above `omega_floor` wherever it is evaluated. Fast
/// channel indices are 0-based throughout the API.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub n: usize,
    pub r: usize,
    pub v_expr: ExprNode,
    pub omega_exprs: Vec<ExprNode>,
    pub y_star: Vec<f64>,
    pub p_star: Vec<f64>,
    pub u_star: Vec<f64>,
    pub horizon: f64,
    pub omega_floor: f64,
    v_tape: Tape,
    omega_tapes: Vec<Tape>,
}

/// On-disk JSON form of a model definition.
#[derive(Debug, Deserialize)]
struct ModelConfig {
    name: String,
    n: usize,
    r: usize,
    #[serde(rename = "V")]
    v: String,
    omega: Vec<String>,
    y_star: Vec<f64>,
    p_star: Vec<f64>,
    u_star: Vec<f64>,
    #[serde(rename = "T")]
    horizon: f64,
    omega_floor: Option<f64>,
}

/// Default frequency floor when the config omits `omega_floor`.
pub const DEFAULT_OMEGA_FLOOR: f64 = 1e-6;

/// Parses and validates a JSON model config.
pub fn parse_model(config: &str) -> Result<ModelSpec> {
    let cfg: ModelConfig = serde_json::from_str(config)
        .map_err(|e| Error::MalformedExpression(format!("bad model config: {e}")))?;
    let v_expr = ExprNode::parse(&cfg.v)?;
    let omega_exprs: Vec<ExprNode> = cfg
        .omega
        .iter()
        .map(|s| ExprNode::parse(s))
        .collect::<Result<_>>()?;
    ModelSpec::new(
        cfg.name,
        cfg.n,
        cfg.r,
        v_expr,
        omega_exprs,
        cfg.y_star,
        cfg.p_star,
        cfg.u_star,
        cfg.horizon,
        cfg.omega_floor.unwrap_or(DEFAULT_OMEGA_FLOOR),
    )
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: String,
        n: usize,
        r: usize,
        v_expr: ExprNode,
        omega_exprs: Vec<ExprNode>,
        y_star: Vec<f64>,
        p_star: Vec<f64>,
        u_star: Vec<f64>,
        horizon: f64,
        omega_floor: f64,
    ) -> Result<ModelSpec> {
        if n == 0 || r == 0 {
            return Err(Error::DimensionMismatch(
                "dimensions n and r must be at least 1".into(),
            ));
        }
        if y_star.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "y_star has length {} but n = {n}",
                y_star.len()
            )));
        }
        if p_star.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "p_star has length {} but n = {n}",
                p_star.len()
            )));
        }
        if u_star.len() != r {
            return Err(Error::DimensionMismatch(format!(
                "u_star has length {} but r = {r}",
                u_star.len()
            )));
        }
        if omega_exprs.len() != r {
            return Err(Error::DimensionMismatch(format!(
                "{} frequency expressions but r = {r}",
                omega_exprs.len()
            )));
        }
        if !(omega_floor > 0.0) {
            return Err(Error::DimensionMismatch(format!(
                "omega_floor must be positive, got {omega_floor}"
            )));
        }
        for (name_str, expr) in
            std::iter::once(("V", &v_expr)).chain(omega_exprs.iter().map(|e| ("omega", e)))
        {
            if let Some(j) = expr.max_var() {
                if j >= n {
                    return Err(Error::DimensionMismatch(format!(
                        "{name_str} references y{} but n = {n}",
                        j + 1
                    )));
                }
            }
        }
        let v_tape = Tape::compile(&v_expr);
        let omega_tapes: Vec<Tape> = omega_exprs.iter().map(Tape::compile).collect();
        let spec = ModelSpec {
            name,
            n,
            r,
            v_expr,
            omega_exprs,
            y_star,
            p_star,
            u_star,
            horizon,
            omega_floor,
            v_tape,
            omega_tapes,
        };
        // Frequencies must clear the floor at the initial point.
        let mut scratch = Vec::new();
        for lam in 0..r {
            let v = spec.omega_tapes[lam].eval_value(&spec.y_star, &mut scratch)?;
            if v < spec.omega_floor {
                return Err(Error::NonPositiveFrequencyAtStart { lambda: lam + 1, value: v });
            }
        }
        Ok(spec)
    }

    /// The test problem used throughout the acceptance experiments:
    /// n = r = 2, quartic slow potential, state-dependent frequencies.
    pub fn builtin_test() -> ModelSpec {
        parse_model(
            r#"{
                "name": "builtin_test",
                "n": 2, "r": 2,
                "V": "0.5*y1^4 + 0.5*y2^4",
                "omega": ["4 + (y1*y2)^2", "2 + sin(y1)"],
                "y_star": [1.0, -0.5],
                "p_star": [1.0, 1.2],
                "u_star": [3.0, 2.0],
                "T": 1.0
            }"#,
        )
        .expect("builtin test model is valid")
    }

    /// Variant with constant frequencies; used to exercise the degenerate
    /// case where every frequency-derivative coupling term vanishes.
    pub fn builtin_const() -> ModelSpec {
        parse_model(
            r#"{
                "name": "builtin_const",
                "n": 2, "r": 2,
                "V": "0.5*y1^4 + 0.5*y2^4",
                "omega": ["3", "1.5"],
                "y_star": [1.0, -0.5],
                "p_star": [1.0, 1.2],
                "u_star": [3.0, 2.0],
                "T": 1.0
            }"#,
        )
        .expect("builtin constant-frequency model is valid")
    }

    /// Value, gradient, and Hessian of the slow potential at `y`.
    pub fn v_jet(&self, y: &[f64]) -> Result<Jet2> {
        self.check_dim(y)?;
        self.v_tape.eval_jet2_owned(y)
    }

    /// Value, gradient, and Hessian of `omega_lam` at `y` (`lam` 0-based).
    pub fn omega_jet(&self, lam: usize, y: &[f64]) -> Result<Jet2> {
        self.check_dim(y)?;
        let jet = self.omega_tapes[lam].eval_jet2_owned(y)?;
        self.check_floor(lam, jet.value, y)?;
        Ok(jet)
    }

    /// Jet of `L_lam = log omega_lam` at `y`.
    pub fn log_omega_jet(&self, lam: usize, y: &[f64]) -> Result<Jet2> {
        let w = self.omega_jet(lam, y)?;
        log_jet(&w)
    }

    /// Leading-order adiabatic invariants `theta*_lam = (u*_lam)^2 / (2 omega_lam(y*))`.
    pub fn theta_star(&self) -> Result<Vec<f64>> {
        let mut scratch = Vec::new();
        (0..self.r)
            .map(|lam| {
                let w = self.omega_tapes[lam].eval_value(&self.y_star, &mut scratch)?;
                self.check_floor(lam, w, &self.y_star)?;
                Ok(self.u_star[lam] * self.u_star[lam] / (2.0 * w))
            })
            .collect()
    }

    // ----- allocation-free fast paths for integration loops -----

    /// Value of V; gradient written into `grad`.
    pub fn v_grad(&self, y: &[f64], scratch: &mut Vec<f64>, grad: &mut [f64]) -> Result<f64> {
        self.v_tape.eval_grad(y, scratch, grad)
    }

    /// Value of `omega_lam` (floor-checked); gradient written into `grad`.
    pub fn omega_grad(
        &self,
        lam: usize,
        y: &[f64],
        scratch: &mut Vec<f64>,
        grad: &mut [f64],
    ) -> Result<f64> {
        let v = self.omega_tapes[lam].eval_grad(y, scratch, grad)?;
        self.check_floor(lam, v, y)?;
        Ok(v)
    }

    /// Value of `omega_lam` only (floor-checked).
    pub fn omega_value(&self, lam: usize, y: &[f64], scratch: &mut Vec<f64>) -> Result<f64> {
        let v = self.omega_tapes[lam].eval_value(y, scratch)?;
        self.check_floor(lam, v, y)?;
        Ok(v)
    }

    /// Value of V only.
    pub fn v_value(&self, y: &[f64], scratch: &mut Vec<f64>) -> Result<f64> {
        self.v_tape.eval_value(y, scratch)
    }

    /// Full jet of V written into caller buffers.
    pub fn v_jet2_into(
        &self,
        y: &[f64],
        scratch: &mut Vec<f64>,
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> Result<f64> {
        self.v_tape.eval_jet2(y, scratch, grad, hess)
    }

    /// Full jet of `omega_lam` (floor-checked) written into caller buffers.
    pub fn omega_jet2_into(
        &self,
        lam: usize,
        y: &[f64],
        scratch: &mut Vec<f64>,
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> Result<f64> {
        let v = self.omega_tapes[lam].eval_jet2(y, scratch, grad, hess)?;
        self.check_floor(lam, v, y)?;
        Ok(v)
    }

    fn check_dim(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "point has length {} but n = {}",
                y.len(),
                self.n
            )));
        }
        Ok(())
    }

    fn check_floor(&self, lam: usize, value: f64, y: &[f64]) -> Result<()> {
        if value < self.omega_floor {
            return Err(Error::FrequencyNotPositive {
                lambda: lam + 1,
                value,
                floor: self.omega_floor,
                y: y.to_vec(),
            });
        }
        Ok(())
    }
}

/// Jet of `log` applied to a positive-valued jet:
/// `DL = Dw/w`, `D^2 L = D^2 w / w - (Dw ⊗ Dw) / w^2`.
pub fn log_jet(w: &Jet2) -> Result<Jet2> {
    if w.value <= 0.0 {
        return Err(Error::DomainError(format!(
            "log of non-positive argument {}",
            w.value
        )));
    }
    let n = w.dim();
    let inv = 1.0 / w.value;
    let gradient: Vec<f64> = w.gradient.iter().map(|g| g * inv).collect();
    let mut hessian = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            hessian[i * n + j] =
                w.hessian[i * n + j] * inv - w.gradient[i] * w.gradient[j] * inv * inv;
        }
    }
    Ok(Jet2 {
        value: w.value.ln(),
        gradient,
        hessian,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn builtin_test_matches_reference_values() {
        let m = ModelSpec::builtin_test();
        assert_eq!(m.n, 2);
        assert_eq!(m.r, 2);
        assert_eq!(m.y_star, vec![1.0, -0.5]);
        assert_eq!(m.p_star, vec![1.0, 1.2]);
        assert_eq!(m.u_star, vec![3.0, 2.0]);

        let y = [1.0, -0.5];
        let v = m.v_jet(&y).unwrap();
        assert_relative_eq!(v.value, 0.53125, max_relative = 1e-14);
        assert_relative_eq!(v.gradient[0], 2.0, max_relative = 1e-14);
        assert_relative_eq!(v.gradient[1], -0.25, max_relative = 1e-14);

        let w1 = m.omega_jet(0, &y).unwrap();
        assert_relative_eq!(w1.value, 4.25, max_relative = 1e-14);
        assert_relative_eq!(w1.gradient[0], 0.5, max_relative = 1e-14);
        assert_relative_eq!(w1.gradient[1], -1.0, max_relative = 1e-14);

        let w2 = m.omega_jet(1, &[0.0, 17.0]).unwrap();
        assert_relative_eq!(w2.value, 2.0, max_relative = 1e-14);
        assert_relative_eq!(w2.gradient[0], 1.0, max_relative = 1e-14);
        assert_eq!(w2.gradient[1], 0.0);
    }

    #[test]
    fn omega2_is_independent_of_y2() {
        let m = ModelSpec::builtin_test();
        for y in [[1.0, -0.5], [0.2, 3.0], [-1.5, -7.0]] {
            let w = m.omega_jet(1, &y).unwrap();
            assert_eq!(w.gradient[1], 0.0);
            assert_eq!(w.hess(1, 1), 0.0);
            assert_eq!(w.hess(0, 1), 0.0);
        }
    }

    #[test]
    fn log_omega_jet_reference_values() {
        let m = ModelSpec::builtin_test();
        let y = [1.0, -0.5];
        let l1 = m.log_omega_jet(0, &y).unwrap();
        assert_relative_eq!(l1.value, 4.25_f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(l1.gradient[0], 0.5 / 4.25, max_relative = 1e-13);
        assert_relative_eq!(l1.gradient[1], -1.0 / 4.25, max_relative = 1e-13);
        assert_relative_eq!(
            m.log_omega_jet(0, &y).unwrap().value,
            m.omega_jet(0, &y).unwrap().value.ln(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn log_omega_hessian_matches_finite_difference_of_gradient() {
        let m = ModelSpec::builtin_test();
        let y = [0.7, -0.9];
        let h = 1e-5;
        for lam in 0..2 {
            let jet = m.log_omega_jet(lam, &y).unwrap();
            for j in 0..2 {
                let mut yp = y;
                let mut ym = y;
                yp[j] += h;
                ym[j] -= h;
                let gp = m.log_omega_jet(lam, &yp).unwrap().gradient;
                let gm = m.log_omega_jet(lam, &ym).unwrap().gradient;
                for i in 0..2 {
                    let fd = (gp[i] - gm[i]) / (2.0 * h);
                    assert!(
                        (jet.hess(j, i) - fd).abs() <= 1e-6 * jet.hess(j, i).abs().max(1.0),
                        "lam={lam} ({j},{i}): {} vs {fd}",
                        jet.hess(j, i)
                    );
                }
            }
        }
    }

    #[test]
    fn theta_star_reference_values() {
        let m = ModelSpec::builtin_test();
        let th = m.theta_star().unwrap();
        assert_relative_eq!(th[0], 9.0 / 8.5, max_relative = 1e-14);
        assert_relative_eq!(th[1], 4.0 / (2.0 * (2.0 + 1.0_f64.sin())), max_relative = 1e-14);
        assert_relative_eq!(th[0], 1.0588235294117647, max_relative = 1e-12);
        assert_relative_eq!(th[1], 0.7038607857314488, max_relative = 1e-12);
    }

    #[test]
    fn theta_star_scales_quadratically_in_u() {
        let mut m = ModelSpec::builtin_test();
        let th = m.theta_star().unwrap();
        m.u_star = m.u_star.iter().map(|u| 2.0 * u).collect();
        let th2 = m.theta_star().unwrap();
        for lam in 0..2 {
            assert_relative_eq!(th2[lam], 4.0 * th[lam], max_relative = 1e-14);
        }
    }

    #[test]
    fn zero_u_gives_zero_theta() {
        let mut m = ModelSpec::builtin_test();
        m.u_star = vec![0.0, 0.0];
        assert_eq!(m.theta_star().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let bad = r#"{
            "name": "bad", "n": 2, "r": 2,
            "V": "y1^2", "omega": ["3", "4"],
            "y_star": [1.0, 2.0], "p_star": [0.0, 0.0],
            "u_star": [1.0, 1.0, 1.0], "T": 1.0
        }"#;
        assert!(matches!(parse_model(bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn non_positive_initial_frequency_is_rejected() {
        let bad = r#"{
            "name": "bad", "n": 1, "r": 1,
            "V": "y1^2", "omega": ["-3"],
            "y_star": [1.0], "p_star": [0.0],
            "u_star": [1.0], "T": 1.0
        }"#;
        assert!(matches!(
            parse_model(bad),
            Err(Error::NonPositiveFrequencyAtStart { lambda: 1, .. })
        ));
    }

    #[test]
    fn constant_potential_has_zero_derivatives() {
        let m = parse_model(
            r#"{
                "name": "c", "n": 2, "r": 1,
                "V": "7", "omega": ["3"],
                "y_star": [0.0, 0.0], "p_star": [0.0, 0.0],
                "u_star": [1.0], "T": 1.0
            }"#,
        )
        .unwrap();
        let v = m.v_jet(&[0.3, -2.0]).unwrap();
        assert_eq!(v.value, 7.0);
        assert_eq!(v.gradient, vec![0.0, 0.0]);
        assert_eq!(v.hessian, vec![0.0; 4]);
        let l = m.log_omega_jet(0, &[0.3, -2.0]).unwrap();
        assert_eq!(l.gradient, vec![0.0, 0.0]);
    }

    #[test]
    fn quartic_hessian_matches_finite_difference() {
        let m = ModelSpec::builtin_test();
        let h = 1e-5;
        let jet = m.v_jet(&[1.0, -0.5]).unwrap();
        let gp = m.v_jet(&[1.0 + h, -0.5]).unwrap().gradient;
        let gm = m.v_jet(&[1.0 - h, -0.5]).unwrap().gradient;
        let fd = (gp[0] - gm[0]) / (2.0 * h);
        assert!((jet.hess(0, 0) - 6.0).abs() <= 1e-12);
        assert!((jet.hess(0, 0) - fd).abs() <= 1e-6);
    }

    #[test]
    fn frequency_floor_is_enforced_during_evaluation() {
        let m = parse_model(
            r#"{
                "name": "dip", "n": 1, "r": 1,
                "V": "y1^2", "omega": ["y1"],
                "y_star": [1.0], "p_star": [0.0],
                "u_star": [1.0], "T": 1.0, "omega_floor": 0.5
            }"#,
        )
        .unwrap();
        assert!(m.omega_jet(0, &[1.0]).is_ok());
        assert!(matches!(
            m.omega_jet(0, &[0.1]),
            Err(Error::FrequencyNotPositive { lambda: 1, .. })
        ));
    }
}
