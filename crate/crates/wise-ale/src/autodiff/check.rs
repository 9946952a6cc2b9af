//! Central-difference certification of reverse-mode gradients.
//!
//! The certifier is deliberately independent of the tape's backward pass: it
//! only re-evaluates the loss at perturbed parameter vectors and compares
//! `(f(p+h) - f(p-h)) / 2h` against the analytic gradient supplied by the
//! caller.

use super::array::DenseArray;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// At most this many coordinates are probed; beyond it a seeded random
/// subset is drawn.
pub const MAX_COORDS: usize = 500;

/// One coordinate whose numeric and analytic derivatives disagree.
#[derive(Debug, Clone)]
pub struct CoordFailure {
    /// Index of the parameter array in the flat parameter list.
    pub param_index: usize,
    /// Flat element index within that parameter.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub failures: Vec<CoordFailure>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with a floor so that near-zero derivative pairs are judged
/// on absolute disagreement instead of blowing up the ratio.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(a.abs().max(n.abs()), 1e-6)
}

/// Compares `analytic` (the reverse-mode gradient at `params`) against
/// central differences of `loss_fn` at step `h`. All coordinates are probed
/// when there are at most [`MAX_COORDS`]; otherwise a seeded subset.
///
/// `loss_fn` must be deterministic: any noise it consumes has to be frozen
/// across calls.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[DenseArray],
    analytic: &[DenseArray],
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<CheckReport>
where
    F: FnMut(&[DenseArray]) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::usage(format!("step must be positive, got {step}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::usage(format!(
            "{} parameter arrays but {} gradient arrays",
            params.len(),
            analytic.len()
        )));
    }

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            coords.push((pi, ci));
        }
    }
    if coords.len() > MAX_COORDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(MAX_COORDS);
    }

    let mut work: Vec<DenseArray> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    for &(pi, ci) in &coords {
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + step;
        let f_plus = loss_fn(&work)?;
        work[pi].data_mut()[ci] = orig - step;
        let f_minus = loss_fn(&work)?;
        work[pi].data_mut()[ci] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NumericDomain {
                op: "finite_diff_check",
                detail: format!(
                    "non-finite loss at perturbed coordinate (param {pi}, coord {ci}): \
                     f(+h)={f_plus}, f(-h)={f_minus}"
                ),
            });
        }
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic[pi].data()[ci];
        let e = rel_err(a, numeric);
        max_rel = max_rel.max(e);
        if e > tolerance {
            failures.push(CoordFailure {
                param_index: pi,
                coord: ci,
                analytic: a,
                numeric,
                rel_err: e,
            });
        }
    }

    Ok(CheckReport {
        max_rel_err: max_rel,
        coords_checked: coords.len(),
        tolerance,
        failures,
    })
}
