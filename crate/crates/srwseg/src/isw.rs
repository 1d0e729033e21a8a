//! Instance selective whitening (ISW).
//!
//! Channel covariances of the enhanced features are computed for an original
//! image and its photometrically transformed twin. Covariance entries whose
//! variance across that pair is high carry style; a 1-D k-means split of the
//! variance entries selects them, and the whitening loss drives exactly those
//! covariance entries toward zero. Mask construction (EMA variance, k-means)
//! is a discrete selection step: gradients flow only through the covariance
//! inside the loss.

use ndarray::{Array2, Array3, ArrayD, Ix3};

use crate::autodiff::{self, Graph, Var};
use crate::element::Element;
use crate::error::{Result, SrwError};

/// Subtracts the per-(sample, channel) spatial mean so the Gram matrix below
/// measures covariance rather than a raw second moment.
pub fn center_features<A: Element>(g: &mut Graph<A>, f: Var) -> Result<Var> {
    autodiff::center_spatial(g, f)
}

/// Per-sample channel covariance `[N, C, H, W] -> [N, C, C]`,
/// `theta = M M^T / (H W)`. Symmetric positive semi-definite by construction.
pub fn covariance<A: Element>(g: &mut Graph<A>, f: Var) -> Result<Var> {
    autodiff::covariance_nchw(g, f)
}

/// Whitening objective: mean absolute deviation of the batch-mean covariance
/// from the identity.
pub fn deep_whitening_loss<A: Element>(g: &mut Graph<A>, theta: Var) -> Result<Var> {
    let shape = g.value(theta).shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(SrwError::Validation(format!(
            "deep_whitening_loss: expected [N, C, C] covariance stack, got {shape:?}"
        )));
    }
    let c = shape[1];
    let mean = autodiff::mean_axis0(g, theta)?;
    let eye = g.constant(Array2::<A>::eye(c).into_dyn());
    let dev = autodiff::sub(g, mean, eye)?;
    let dev = autodiff::abs(g, dev);
    Ok(autodiff::mean_all(g, dev))
}

/// Binary symmetric selection mask over covariance entries. The diagonal is
/// never selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WhiteningMask {
    pub m: Array2<u8>,
    /// Number of selected entries counting both triangles.
    pub selected_count: usize,
}

impl WhiteningMask {
    /// All-zero mask (whitening loss vanishes).
    pub fn empty(channels: usize) -> Self {
        WhiteningMask { m: Array2::zeros((channels, channels)), selected_count: 0 }
    }

    pub fn channels(&self) -> usize {
        self.m.dim().0
    }
}

/// Masked whitening loss: per sample, `sum |theta ⊙ m|` divided by the
/// selected entry count, then averaged over the batch. Zero for an empty
/// mask. Normalizing by the selection size keeps magnitudes comparable
/// across layers of different channel width.
pub fn isw_loss<A: Element>(g: &mut Graph<A>, theta: Var, mask: &WhiteningMask) -> Result<Var> {
    let shape = g.value(theta).shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(SrwError::Validation(format!(
            "isw_loss: expected [N, C, C] covariance stack, got {shape:?}"
        )));
    }
    if mask.channels() != shape[1] {
        return Err(SrwError::Validation(format!(
            "isw_loss: mask is {}x{} but covariance is {}x{}",
            mask.channels(),
            mask.channels(),
            shape[1],
            shape[2]
        )));
    }
    if mask.selected_count == 0 {
        return Ok(g.scalar_constant(A::zero()));
    }
    let n = shape[0];
    let c = shape[1];
    let mut mask_stack = Array3::<A>::zeros((n, c, c));
    for mut plane in mask_stack.outer_iter_mut() {
        plane.zip_mut_with(&mask.m, |dst, &bit| *dst = A::lit(bit as f64));
    }
    let mask_var = g.constant(mask_stack.into_dyn());
    let picked = autodiff::mul(g, theta, mask_var)?;
    let picked = autodiff::abs(g, picked);
    let total = autodiff::sum_all(g, picked);
    Ok(autodiff::scale(g, total, A::one() / A::lit((n * mask.selected_count) as f64)))
}

/// Elementwise variance of a covariance pair (original vs transformed),
/// averaged over the batch:
/// `V = mean_n 1/2 [(theta_o - mu)^2 + (theta_a - mu)^2]` with `mu` the
/// per-sample elementwise mean of the two. Algebraically this equals
/// `mean_n (theta_o - theta_a)^2 / 4`.
pub fn pair_variance<A: Element>(
    theta_orig: &Array3<A>,
    theta_aug: &Array3<A>,
) -> Result<Array2<A>> {
    if theta_orig.dim() != theta_aug.dim() {
        return Err(SrwError::Validation(format!(
            "pair_variance: shape mismatch {:?} vs {:?}",
            theta_orig.dim(),
            theta_aug.dim()
        )));
    }
    let (n, c, c2) = theta_orig.dim();
    if n == 0 || c != c2 {
        return Err(SrwError::Validation(format!(
            "pair_variance: need a non-empty [N, C, C] stack, got {:?}",
            theta_orig.dim()
        )));
    }
    let half = A::lit(0.5);
    let mut v = Array2::<A>::zeros((c, c));
    for i in 0..n {
        let to = theta_orig.index_axis(ndarray::Axis(0), i);
        let ta = theta_aug.index_axis(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut v).and(&to).and(&ta).for_each(|dst, &a, &b| {
            let mu = (a + b) * half;
            let da = a - mu;
            let db = b - mu;
            *dst += (da * da + db * db) * half;
        });
    }
    let inv_n = A::one() / A::lit(n as f64);
    v.mapv_inplace(|x| x * inv_n);
    Ok(v)
}

/// Exponential moving average of pair variances for one SRW layer, plus the
/// warm-up counter. Owned by the single training loop; not safe for
/// concurrent mutation.
#[derive(Debug, Clone)]
pub struct VarianceEma<A: Element> {
    ema: Option<Array2<A>>,
    momentum: A,
    warm_samples: u64,
}

impl<A: Element> VarianceEma<A> {
    pub fn new(momentum: A) -> Result<Self> {
        if !(momentum >= A::zero() && momentum < A::one()) {
            return Err(SrwError::Validation(format!(
                "variance EMA momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(VarianceEma { ema: None, momentum, warm_samples: 0 })
    }

    /// Folds one batch variance in: `ema <- m*ema + (1-m)*v`. The first call
    /// initializes the state to `v` directly.
    pub fn update(&mut self, v_batch: &Array2<A>) -> Result<()> {
        match &mut self.ema {
            None => self.ema = Some(v_batch.clone()),
            Some(ema) => {
                if ema.dim() != v_batch.dim() {
                    return Err(SrwError::Validation(format!(
                        "variance EMA shape mismatch: state {:?}, batch {:?}",
                        ema.dim(),
                        v_batch.dim()
                    )));
                }
                let m = self.momentum;
                let one_m = A::one() - m;
                ndarray::Zip::from(ema).and(v_batch).for_each(|e, &v| *e = m * *e + one_m * v);
            }
        }
        self.warm_samples += 1;
        Ok(())
    }

    pub fn value(&self) -> Option<&Array2<A>> {
        self.ema.as_ref()
    }

    pub fn momentum(&self) -> A {
        self.momentum
    }

    pub fn warm_samples(&self) -> u64 {
        self.warm_samples
    }

    /// Rebuilds state from checkpoint fields.
    pub fn from_parts(ema: Option<Array2<A>>, momentum: A, warm_samples: u64) -> Result<Self> {
        let mut s = Self::new(momentum)?;
        s.ema = ema;
        s.warm_samples = warm_samples;
        Ok(s)
    }
}

/// Result of [`kmeans_1d`].
#[derive(Debug, Clone)]
pub struct Kmeans1d {
    pub assignments: Vec<usize>,
    pub centroids: Vec<f64>,
}

/// Deterministic 1-D k-means.
///
/// For two clusters the objective is solved exactly: optimal clusters are
/// contiguous in sorted order, so every split point is scanned and the one
/// with the smallest within-cluster SSE wins (ties go to the smallest left
/// cluster; cluster 0 is the lower one). Lloyd iterations with range-spread
/// initialization can stall in a local minimum on exactly the multi-modal
/// inputs the whitening mask cares about, so they are used only for other
/// values of k. The `seed` argument is accepted for interface stability but
/// no step consumes randomness.
pub fn kmeans_1d(values: &[f64], k: usize, max_iters: usize, _seed: u64) -> Result<Kmeans1d> {
    if values.is_empty() {
        return Err(SrwError::Validation("kmeans_1d: empty input".into()));
    }
    if k == 0 {
        return Err(SrwError::Validation("kmeans_1d: k must be >= 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SrwError::Validation("kmeans_1d: non-finite value".into()));
    }
    if k == 1 {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        return Ok(Kmeans1d { assignments: vec![0; values.len()], centroids: vec![mean] });
    }
    if k == 2 {
        return Ok(exact_two_means(values));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut centroids: Vec<f64> =
        (0..k).map(|i| min + (max - min) * i as f64 / (k - 1) as f64).collect();
    let mut assignments = vec![0usize; values.len()];

    for _ in 0..max_iters {
        let mut changed = false;
        for (i, &v) in values.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = (v - centroids[0]).abs();
            for (j, &c) in centroids.iter().enumerate().skip(1) {
                let d = (v - c).abs();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for (i, &v) in values.iter().enumerate() {
            sums[assignments[i]] += v;
            counts[assignments[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(Kmeans1d { assignments, centroids })
}

/// Exact two-cluster solution by scanning the n-1 splits of the sorted
/// values with prefix sums. All-equal inputs collapse to a single effective
/// cluster (everything assigned to cluster 0, both centroids equal).
fn exact_two_means(values: &[f64]) -> Kmeans1d {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a].partial_cmp(&values[b]).expect("finite values").then(a.cmp(&b))
    });
    let vmin = values[order[0]];
    let vmax = values[order[n - 1]];
    if n == 1 || vmin == vmax {
        let c = values[order[0]];
        return Kmeans1d { assignments: vec![0; n], centroids: vec![c, c] };
    }
    let mut prefix = vec![0.0f64; n + 1];
    let mut prefix_sq = vec![0.0f64; n + 1];
    for (i, &idx) in order.iter().enumerate() {
        prefix[i + 1] = prefix[i] + values[idx];
        prefix_sq[i + 1] = prefix_sq[i] + values[idx] * values[idx];
    }
    let range_sse = |lo: usize, hi: usize| -> f64 {
        // SSE over sorted positions [lo, hi)
        let cnt = (hi - lo) as f64;
        let s = prefix[hi] - prefix[lo];
        let sq = prefix_sq[hi] - prefix_sq[lo];
        (sq - s * s / cnt).max(0.0)
    };
    let mut best_split = 1usize;
    let mut best_sse = f64::INFINITY;
    for split in 1..n {
        let sse = range_sse(0, split) + range_sse(split, n);
        if sse < best_sse {
            best_sse = sse;
            best_split = split;
        }
    }
    let mean_left = (prefix[best_split] - prefix[0]) / best_split as f64;
    let mean_right = (prefix[n] - prefix[best_split]) / (n - best_split) as f64;
    let mut assignments = vec![0usize; n];
    for &idx in &order[best_split..] {
        assignments[idx] = 1;
    }
    Kmeans1d { assignments, centroids: vec![mean_left, mean_right] }
}

/// Splits the EMA variance entries into a high (style) and low (content)
/// group and returns the mask selecting the high group.
///
/// Degenerate inputs (fewer than two strict-upper-triangle entries, all
/// entries equal, or a collapsed clustering) yield the empty mask: nothing is
/// confidently style-bearing, so nothing is whitened.
pub fn cluster_variance<A: Element>(state: &VarianceEma<A>) -> Result<WhiteningMask> {
    let ema = state.value().ok_or_else(|| {
        SrwError::State(
            "variance EMA is empty: accumulate pair variances before clustering".into(),
        )
    })?;
    let c = ema.dim().0;
    if ema.dim().1 != c {
        return Err(SrwError::Validation(format!("cluster_variance: non-square EMA {:?}", ema.dim())));
    }
    let mut positions = Vec::with_capacity(c.saturating_sub(1) * c / 2);
    let mut values = Vec::with_capacity(positions.capacity());
    for i in 0..c {
        for j in (i + 1)..c {
            positions.push((i, j));
            values.push(ema[(i, j)].as_f64());
        }
    }
    if values.len() < 2 {
        return Ok(WhiteningMask::empty(c));
    }
    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if vmin == vmax {
        return Ok(WhiteningMask::empty(c));
    }
    let km = kmeans_1d(&values, 2, 50, 0)?;
    let high = if km.centroids[0] >= km.centroids[1] { 0 } else { 1 };
    let n_high = km.assignments.iter().filter(|&&a| a == high).count();
    if n_high == 0 || n_high == values.len() {
        return Ok(WhiteningMask::empty(c));
    }
    let mut m = Array2::<u8>::zeros((c, c));
    for (idx, &(i, j)) in positions.iter().enumerate() {
        if km.assignments[idx] == high {
            m[(i, j)] = 1;
            m[(j, i)] = 1;
        }
    }
    Ok(WhiteningMask { m, selected_count: 2 * n_high })
}

/// Evaluates covariance of a plain array outside any graph; convenience for
/// statistics and tests.
pub fn covariance_array<A: Element>(f: &ndarray::Array4<A>, center: bool) -> Array3<A> {
    let mut g = Graph::<A>::new();
    let x = g.constant(f.clone().into_dyn());
    let x = if center { center_features(&mut g, x).expect("rank-4 input") } else { x };
    let theta = covariance(&mut g, x).expect("rank-4 input");
    clone_as3(g.value(theta))
}

fn clone_as3<A: Element>(v: &ArrayD<A>) -> Array3<A> {
    v.view().into_dimensionality::<Ix3>().expect("rank-3 value").to_owned()
}
