use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 24;

/// Tanh–sinh quadrature on `[a, b]`, bisecting until each piece reports an
/// error estimate below its share of `tol`.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    rec(f, a, b, tol, MAX_DEPTH)
}

fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> Result<f64> {
    let o = quadrature::double_exponential::integrate(f, a, b, tol);
    if o.error_estimate <= tol {
        return Ok(o.integral);
    }
    if depth == 0 {
        return Err(Error::TruncationBudgetExceeded(format!(
            "quadrature on [{a}, {b}] stalled at error {:.3e}",
            o.error_estimate
        )));
    }
    let m = 0.5 * (a + b);
    Ok(rec(f, a, m, 0.5 * tol, depth - 1)? + rec(f, m, b, 0.5 * tol, depth - 1)?)
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn legendre_rule(n: usize) -> Vec<(f64, f64)> {
    GaussLegendre::new(NonZeroUsize::new(n).expect("n > 0")).as_node_weight_pairs().to_vec()
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for weight `e^{-x²}`.
pub fn hermite_rule(n: usize) -> Vec<(f64, f64)> {
    GaussHermite::new(NonZeroUsize::new(n).expect("n > 0")).as_node_weight_pairs().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn narrow_peak_needs_bisection() {
        let v = integrate_adaptive(&|x: f64| (-50.0 * (x - 3.0) * (x - 3.0)).exp(), 0.0, 40.0, 1e-12).unwrap();
        assert!((v - (std::f64::consts::PI / 50.0).sqrt()).abs() < 1e-11);
    }

    #[test]
    fn rules_integrate_polynomials() {
        let s: f64 = legendre_rule(5).iter().map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
        let h: f64 = hermite_rule(10).iter().map(|(x, w)| w * x * x).sum();
        assert!((h - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-13);
    }
}
