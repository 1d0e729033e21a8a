//! Finite-difference verification of analytic gradients.
//!
//! A check rebuilds the graph per probe, so it is meant for small tensors.
//! Central differences at f64 with step `h` give truncation error O(h^2) and
//! roundoff O(eps/h); the default step 1e-6 balances the two for losses of
//! order one.

use ndarray::ArrayD;

use super::{Graph, Var};
use crate::error::{Result, SrwError};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// When both the analytic and numeric derivative are below this magnitude the
/// probe is compared absolutely instead of relatively (the relative error of
/// two near-zero numbers is noise). The absolute tolerance sits above the
/// central-difference roundoff floor `eps * |loss| / h`.
const ZERO_BAND: f64 = 1e-6;
const ZERO_ABS_TOL: f64 = 5e-8;

/// One probe whose analytic and numeric derivatives disagree the most.
#[derive(Debug, Clone)]
pub struct FdIssue {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdCheck {
    /// Largest relative error over all probed elements outside the zero band.
    pub max_rel_err: f64,
    /// Probes compared (relative or absolute).
    pub checked: usize,
    /// Probes skipped because the loss is locally non-differentiable there.
    pub skipped: usize,
    pub worst: Option<FdIssue>,
}

impl FdCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients of `build` against central finite differences.
///
/// `build` receives one differentiable leaf per input tensor and must return
/// a scalar loss. `probes_per_input` caps how many elements of each input are
/// perturbed (`None` = all), sampled deterministically from `seed`.
pub fn check_gradients<F>(
    build: F,
    inputs: &[ArrayD<f64>],
    h: f64,
    probes_per_input: Option<usize>,
    seed: u64,
) -> Result<FdCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[ArrayD<f64>]| -> Result<(f64, Option<Vec<Option<ArrayD<f64>>>>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        if g.value(loss).len() != 1 {
            return Err(SrwError::Validation("gradient check: loss must be scalar".into()));
        }
        Ok((g.scalar_value(loss), {
            let mut grads = g.backward(loss)?;
            Some(vars.iter().map(|&v| grads.take(v)).collect())
        }))
    };

    let (_, grads) = eval(inputs)?;
    let grads = grads.expect("gradients requested");

    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0usize;
    let skipped = 0usize;
    let mut worst: Option<FdIssue> = None;

    for (idx, input) in inputs.iter().enumerate() {
        let grad = grads[idx]
            .as_ref()
            .ok_or_else(|| {
                SrwError::Validation(format!("gradient check: input {idx} received no gradient"))
            })?
            .clone();
        let len = input.len();
        let elements: Vec<usize> = match probes_per_input {
            Some(k) if k < len => sample_indices(len, k, seed ^ (idx as u64).wrapping_mul(0x9e37)),
            _ => (0..len).collect(),
        };
        for e in elements {
            let base = work[idx].as_slice_mut().expect("standard layout")[e];
            work[idx].as_slice_mut().expect("standard layout")[e] = base + h;
            let (f_plus, _) = eval_loss_only(&build, &work)?;
            work[idx].as_slice_mut().expect("standard layout")[e] = base - h;
            let (f_minus, _) = eval_loss_only(&build, &work)?;
            work[idx].as_slice_mut().expect("standard layout")[e] = base;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = grad.as_slice().expect("standard layout")[e];
            checked += 1;
            let denom = analytic.abs().max(numeric.abs());
            let rel = if denom < ZERO_BAND {
                if (analytic - numeric).abs() > ZERO_ABS_TOL {
                    (analytic - numeric).abs() / ZERO_BAND
                } else {
                    0.0
                }
            } else {
                (analytic - numeric).abs() / denom
            };
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some(FdIssue { input: idx, element: e, analytic, numeric, rel_err: rel });
            }
        }
    }
    Ok(FdCheck { max_rel_err, checked, skipped, worst })
}

fn eval_loss_only<F>(build: &F, tensors: &[ArrayD<f64>]) -> Result<(f64, ())>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok((g.scalar_value(loss), ()))
}

fn sample_indices(len: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(&mut rng);
    all.truncate(k);
    all.sort_unstable();
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops;
    use ndarray::arr1;

    #[test]
    fn quadratic_gradient_verified() {
        // loss = mean(x * x), d/dx = 2x / n
        let x = arr1(&[0.5, -1.5, 2.0]).into_dyn();
        let check = check_gradients(
            |g, vars| {
                let sq = ops::mul(g, vars[0], vars[0])?;
                Ok(ops::mean_all(g, sq))
            },
            &[x],
            DEFAULT_FD_STEP,
            None,
            0,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-8, "rel err {}", check.max_rel_err);
        assert_eq!(check.checked, 3);
    }

    #[test]
    fn deliberately_wrong_backward_is_caught() {
        // Forward doubles the input but backward claims the identity; the
        // harness has to flag the factor-2 mismatch.
        let x = arr1(&[1.0, 2.0]).into_dyn();
        let check = check_gradients(
            |g, vars| {
                let v = vars[0];
                let value = g.value(v).mapv(|a| a * 2.0);
                let bad = g.push_op(value, vec![v], Box::new(|_, gout, _| vec![Some(gout.clone())]));
                Ok(ops::mean_all(g, bad))
            },
            &[x],
            DEFAULT_FD_STEP,
            None,
            0,
        )
        .unwrap();
        assert!(check.max_rel_err > 0.4, "rel err {}", check.max_rel_err);
    }
}
