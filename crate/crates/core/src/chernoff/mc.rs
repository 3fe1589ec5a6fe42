use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{ChernoffOp, ChernoffPlan};
use crate::error::{Error, Result};
use crate::fields::{GeneratorSpec, ScalarField};
use crate::manifold::{Coords, Point};
use crate::rng::{mean_stderr, substream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Monte Carlo estimate of `(S(t/n)^n f)(x)`.
///
/// Each path picks one branch per step with probability proportional to
/// `|weight|`. A potential adds a "stay" branch with signed weight
/// `(t/n) c(y)`; the path carries the product of `W · sign(w)` where `W` is
/// the total absolute weight at that step, so the estimator is unbiased for
/// the branch-tree value even when `c` changes sign.
pub fn iterate_mc(
    spec: &GeneratorSpec,
    plan: &ChernoffPlan,
    t: f64,
    n: usize,
    f: &ScalarField,
    x: &Point,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    spec.manifold().check_point(x)?;
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {samples}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let op = ChernoffOp::new(spec, plan, t / n as f64)?;
    let values: Vec<Result<f64>> =
        (0..samples as u64).into_par_iter().map(|i| sample_path(&op, f, x.coords(), n, seed, i)).collect();
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    let (mean, stderr) = mean_stderr(&values);
    Ok(McEstimate { mean, stderr, samples, seed })
}

fn sample_path(op: &ChernoffOp, f: &ScalarField, x: &[f64], n: usize, seed: u64, index: u64) -> Result<f64> {
    let mut rng = substream(seed, index);
    let mut y = Coords::from_slice(x);
    let mut weight = 1.0;
    let w = op.weights();
    let base_total = op.weight_total();
    for _ in 0..n {
        let stay_w = op.potential_term(&y);
        let total = base_total + stay_w.abs();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (b, wb) in w.iter().enumerate() {
            acc += wb.abs();
            if u < acc {
                chosen = Some(b);
                break;
            }
        }
        match chosen {
            Some(b) => {
                weight *= total * w[b].signum();
                y = op.branch_point(&y, b)?;
            }
            None if stay_w != 0.0 => weight *= total * stay_w.signum(),
            // u landed on the upper edge through rounding
            None => {
                let b = w.len() - 1;
                weight *= total * w[b].signum();
                y = op.branch_point(&y, b)?;
            }
        }
    }
    Ok(weight * f.eval(&y))
}
