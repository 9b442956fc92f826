//! Second-order forward-mode jets: value, gradient and Hessian propagated
//! together through arithmetic and elementary functions.

use crate::error::{Error, Result};

/// Truncated second-order Taylor jet of a scalar function of `n` variables.
///
/// The Hessian is stored row-major as a full `n x n` matrix and is kept
/// exactly symmetric by construction: every rule below writes `(i, j)` and
/// `(j, i)` from the same expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Row-major `n x n` symmetric matrix.
    pub hessian: Vec<f64>,
}

impl Jet2 {
    pub fn constant(value: f64, n: usize) -> Self {
        Jet2 {
            value,
            gradient: vec![0.0; n],
            hessian: vec![0.0; n * n],
        }
    }

    /// Seed jet for the `j`-th variable (0-based).
    pub fn variable(value: f64, j: usize, n: usize) -> Self {
        let mut jet = Jet2::constant(value, n);
        jet.gradient[j] = 1.0;
        jet
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn add(&self, rhs: &Jet2) -> Jet2 {
        Jet2 {
            value: self.value + rhs.value,
            gradient: zip_map(&self.gradient, &rhs.gradient, |a, b| a + b),
            hessian: zip_map(&self.hessian, &rhs.hessian, |a, b| a + b),
        }
    }

    pub fn sub(&self, rhs: &Jet2) -> Jet2 {
        Jet2 {
            value: self.value - rhs.value,
            gradient: zip_map(&self.gradient, &rhs.gradient, |a, b| a - b),
            hessian: zip_map(&self.hessian, &rhs.hessian, |a, b| a - b),
        }
    }

    pub fn mul(&self, rhs: &Jet2) -> Jet2 {
        let n = self.dim();
        let mut hessian = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                hessian[i * n + j] = self.hessian[i * n + j] * rhs.value
                    + rhs.hessian[i * n + j] * self.value
                    + self.gradient[i] * rhs.gradient[j]
                    + self.gradient[j] * rhs.gradient[i];
            }
        }
        Jet2 {
            value: self.value * rhs.value,
            gradient: (0..n)
                .map(|i| self.gradient[i] * rhs.value + rhs.gradient[i] * self.value)
                .collect(),
            hessian,
        }
    }

    /// Quotient. The denominator carries a positivity domain assumption.
    pub fn div(&self, rhs: &Jet2) -> Result<Jet2> {
        if rhs.value <= 0.0 {
            return Err(Error::DomainError(format!(
                "quotient denominator must be positive, got {}",
                rhs.value
            )));
        }
        let inv = rhs.compose(1.0 / rhs.value, -1.0 / (rhs.value * rhs.value), 2.0 / rhs.value.powi(3));
        Ok(self.mul(&inv))
    }

    /// Integer power `self^k`.
    pub fn powi(&self, k: i32) -> Result<Jet2> {
        if k < 0 && self.value == 0.0 {
            return Err(Error::DomainError("zero raised to a negative power".into()));
        }
        let x = self.value;
        let f = x.powi(k);
        let df = f64::from(k) * pow_or_zero(x, k - 1);
        let ddf = f64::from(k) * f64::from(k - 1) * pow_or_zero(x, k - 2);
        Ok(self.compose(f, df, ddf))
    }

    pub fn sin(&self) -> Jet2 {
        self.compose(self.value.sin(), self.value.cos(), -self.value.sin())
    }

    pub fn cos(&self) -> Jet2 {
        self.compose(self.value.cos(), -self.value.sin(), -self.value.cos())
    }

    pub fn exp(&self) -> Jet2 {
        let e = self.value.exp();
        self.compose(e, e, e)
    }

    pub fn ln(&self) -> Result<Jet2> {
        if self.value <= 0.0 {
            return Err(Error::DomainError(format!(
                "log of non-positive argument {}",
                self.value
            )));
        }
        let x = self.value;
        Ok(self.compose(x.ln(), 1.0 / x, -1.0 / (x * x)))
    }

    /// Chain rule for a scalar function with derivatives `(f, df, ddf)` at
    /// `self.value`.
    fn compose(&self, f: f64, df: f64, ddf: f64) -> Jet2 {
        let n = self.dim();
        let mut hessian = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                hessian[i * n + j] =
                    df * self.hessian[i * n + j] + ddf * self.gradient[i] * self.gradient[j];
            }
        }
        Jet2 {
            value: f,
            gradient: self.gradient.iter().map(|g| df * g).collect(),
            hessian,
        }
    }

    /// Entry `(i, j)` of the Hessian.
    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.hessian[i * self.dim() + j]
    }

    /// Row `i` of the Hessian.
    pub fn hess_row(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.hessian[i * n..(i + 1) * n]
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

// x^k with the convention 0^0 = 1 and 0^negative = 0, used only for
// derivative coefficients that are multiplied by k = 0 anyway.
fn pow_or_zero(x: f64, k: i32) -> f64 {
    if x == 0.0 && k < 0 {
        0.0
    } else {
        x.powi(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn product_rule_hessian_is_symmetric() {
        let x = Jet2::variable(1.3, 0, 2);
        let y = Jet2::variable(-0.7, 1, 2);
        let p = x.mul(&y).mul(&x.sin());
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(p.hess(i, j), p.hess(j, i));
            }
        }
    }

    #[test]
    fn powi_at_zero_base() {
        let x = Jet2::variable(0.0, 0, 1);
        let p = x.powi(2).unwrap();
        assert_eq!(p.value, 0.0);
        assert_eq!(p.gradient[0], 0.0);
        assert_eq!(p.hess(0, 0), 2.0);
    }

    #[test]
    fn ln_matches_closed_form() {
        let x = Jet2::variable(2.0, 0, 1);
        let l = x.ln().unwrap();
        assert_relative_eq!(l.value, 2.0_f64.ln());
        assert_relative_eq!(l.gradient[0], 0.5);
        assert_relative_eq!(l.hess(0, 0), -0.25);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let x = Jet2::variable(-1.0, 0, 1);
        assert!(x.ln().is_err());
    }
}
