//! Style normalization and restitution (SNR) block.
//!
//! Instance normalization strips per-sample style statistics from a feature
//! map; the removed residual is split by a channel-attention gate into a
//! task-relevant part (added back to form the enhanced map) and a task-
//! irrelevant part (forming the corrupted map). A dual entropy-margin loss
//! pushes the enhanced map below the normalized map in pixel entropy and the
//! corrupted map above it.
//!
//! All operations here are pure graph functions: no hidden state, safe to
//! evaluate concurrently on shared read-only inputs.

use ndarray::{Array1, Array2, ArrayD, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{
    self, channel_entropy, instance_norm, linear, mean_all, relu, scale_channels, sigmoid,
    softplus, spatial_mean_hw, Graph, Var,
};
use crate::element::Element;
use crate::error::{Result, SrwError};

/// How the attention vector is pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttentionMode {
    /// One gate vector per sample (global average pool over space only).
    PerSample,
    /// A single gate vector shared by the batch (pool over space and batch).
    BatchShared,
}

/// Bottleneck width for the attention MLP: `C / r_eff` with
/// `r_eff = max(1, min(r, C/4))`, so toy channel counts keep a hidden width
/// of at least four where possible.
pub fn attention_hidden_width(channels: usize, reduction: usize) -> usize {
    let r_eff = reduction.min(channels / 4).max(1);
    (channels / r_eff).max(1)
}

/// Owned parameters of one SNR block: two fully-connected layers around a
/// ReLU, applied to the spatially pooled residual.
#[derive(Debug, Clone)]
pub struct SnrParams<A: Element> {
    pub fc1_w: Array2<A>,
    pub fc1_b: Array1<A>,
    pub fc2_w: Array2<A>,
    pub fc2_b: Array1<A>,
    pub reduction: usize,
    pub eps: A,
}

impl<A: Element> SnrParams<A> {
    /// Zero-initialized parameters (attention collapses to 0.5 everywhere).
    pub fn zeros(channels: usize, reduction: usize, eps: A) -> Result<Self> {
        if channels == 0 {
            return Err(SrwError::Validation("snr: channel count must be >= 1".into()));
        }
        if reduction == 0 {
            return Err(SrwError::Validation("snr: reduction must be >= 1".into()));
        }
        if eps <= A::zero() {
            return Err(SrwError::Validation("snr: eps must be positive".into()));
        }
        let hidden = attention_hidden_width(channels, reduction);
        Ok(SnrParams {
            fc1_w: Array2::zeros((channels, hidden)),
            fc1_b: Array1::zeros(hidden),
            fc2_w: Array2::zeros((hidden, channels)),
            fc2_b: Array1::zeros(channels),
            reduction,
            eps,
        })
    }

    /// He fan-in initialization of the two FC layers; biases stay zero.
    pub fn init_he<R: Rng>(channels: usize, reduction: usize, eps: A, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(channels, reduction, eps)?;
        he_fill(&mut params.fc1_w, rng);
        he_fill(&mut params.fc2_w, rng);
        Ok(params)
    }

    pub fn channels(&self) -> usize {
        self.fc1_w.dim().0
    }

    /// Registers the parameters as differentiable leaves on a graph.
    pub fn bind_leaf(&self, g: &mut Graph<A>) -> SnrParamVars {
        SnrParamVars {
            fc1_w: g.leaf(self.fc1_w.clone().into_dyn()),
            fc1_b: g.leaf(self.fc1_b.clone().into_dyn()),
            fc2_w: g.leaf(self.fc2_w.clone().into_dyn()),
            fc2_b: g.leaf(self.fc2_b.clone().into_dyn()),
        }
    }
}

fn he_fill<A: Element, R: Rng>(w: &mut Array2<A>, rng: &mut R) {
    let fan_in = w.dim().0;
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    for v in w.iter_mut() {
        *v = A::lit(dist.sample(rng));
    }
}

/// Graph handles of one SNR block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct SnrParamVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Everything the SNR block produces for one feature map.
#[derive(Debug, Clone, Copy)]
pub struct SnrOutput {
    /// Instance-normalized features.
    pub normalized: Var,
    /// Normalized plus the task-relevant residual part.
    pub enhanced: Var,
    /// Normalized plus the task-irrelevant residual part.
    pub corrupted: Var,
    pub residual_plus: Var,
    pub residual_minus: Var,
    /// Attention gate, `[N, C]` (or `[1, C]` in batch-shared mode).
    pub alpha: Var,
}

/// Instance normalization without learned affine; see
/// [`autodiff::instance_norm`] for the exact contract.
pub fn instance_normalize<A: Element>(g: &mut Graph<A>, f: Var, eps: A) -> Result<Var> {
    instance_norm(g, f, eps)
}

/// Channel attention over a residual map: sigmoid(FC2(relu(FC1(GAP(r))))).
///
/// Returns `[N, C]` gates in per-sample mode, `[1, C]` in batch-shared mode.
pub fn channel_attention<A: Element>(
    g: &mut Graph<A>,
    r: Var,
    params: &SnrParamVars,
    mode: AttentionMode,
) -> Result<Var> {
    let shape = g.value(r).shape().to_vec();
    if shape.len() != 4 {
        return Err(SrwError::Validation(format!(
            "channel_attention: expected rank-4 residual, got {:?}",
            shape
        )));
    }
    let channels = shape[1];
    let fc1_rows = g.value(params.fc1_w).shape()[0];
    if fc1_rows != channels {
        return Err(SrwError::Validation(format!(
            "channel_attention: residual has {channels} channels but fc1 expects {fc1_rows}"
        )));
    }
    let mut pooled = autodiff::spatial_gap(g, r)?;
    if mode == AttentionMode::BatchShared {
        let mean = autodiff::mean_axis0(g, pooled)?;
        pooled = autodiff::reshape(g, mean, &[1, channels])?;
    }
    let hidden = linear(g, pooled, params.fc1_w, params.fc1_b)?;
    let hidden = relu(g, hidden);
    let logits = linear(g, hidden, params.fc2_w, params.fc2_b)?;
    Ok(sigmoid(g, logits))
}

/// Splits a residual into gated parts: `R+ = alpha ⊙ R`, `R- = (1-alpha) ⊙ R`.
///
/// Gate entries must lie in `[0, 1]`; sigmoid outputs are strictly inside and
/// the closed endpoints are accepted as limits. Anything else signals a
/// broken attention head and is rejected.
pub fn restitution_split<A: Element>(
    g: &mut Graph<A>,
    r: Var,
    alpha: Var,
) -> Result<(Var, Var)> {
    let av = g
        .value(alpha)
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| SrwError::Validation("restitution_split: alpha must be rank 2".into()))?;
    if av.iter().any(|&a| !(a >= A::zero() && a <= A::one())) {
        return Err(SrwError::Validation(
            "restitution_split: attention values outside [0, 1]".into(),
        ));
    }
    let ones = g.constant(ArrayD::ones(g.value(alpha).raw_dim()));
    let inv_alpha = autodiff::sub(g, ones, alpha)?;
    let r_plus = scale_channels(g, r, alpha)?;
    let r_minus = scale_channels(g, r, inv_alpha)?;
    Ok((r_plus, r_minus))
}

/// Full SNR block: normalize, split the removed residual by attention, and
/// form the enhanced / corrupted maps.
pub fn snr_forward<A: Element>(
    g: &mut Graph<A>,
    f: Var,
    params: &SnrParamVars,
    eps: A,
    mode: AttentionMode,
) -> Result<SnrOutput> {
    let normalized = instance_normalize(g, f, eps)?;
    let residual = autodiff::sub(g, f, normalized)?;
    let alpha = channel_attention(g, residual, params, mode)?;
    let (residual_plus, residual_minus) = restitution_split(g, residual, alpha)?;
    let enhanced = autodiff::add(g, normalized, residual_plus)?;
    let corrupted = autodiff::add(g, normalized, residual_minus)?;
    Ok(SnrOutput { normalized, enhanced, corrupted, residual_plus, residual_minus, alpha })
}

/// Per-pixel entropy of the channel softmax; `[N, C, H, W] -> [N, H, W]`,
/// values in `[0, ln C]`.
pub fn pixel_entropy<A: Element>(g: &mut Graph<A>, f: Var) -> Result<Var> {
    channel_entropy(g, f)
}

/// Smooth margin penalty `ln(1 + exp(x))`, elementwise.
pub fn margin_loss<A: Element>(g: &mut Graph<A>, x: Var) -> Var {
    softplus(g, x)
}

/// Scalar form of [`margin_loss`] in the overflow-safe formulation
/// `max(x, 0) + ln(1 + exp(-|x|))`.
pub fn margin_loss_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dual entropy-margin loss over the three SNR maps.
///
/// Per sample: `L+ = margin(mean_px[E(enhanced) - E(normalized)])` and
/// `L- = margin(mean_px[E(normalized) - E(corrupted)])`; the result is
/// `L+ + L-` averaged over the batch. Strictly positive.
pub fn dual_causality_loss<A: Element>(
    g: &mut Graph<A>,
    enhanced: Var,
    normalized: Var,
    corrupted: Var,
) -> Result<Var> {
    let s_enh = g.value(enhanced).shape().to_vec();
    if g.value(normalized).shape() != &s_enh[..] || g.value(corrupted).shape() != &s_enh[..] {
        return Err(SrwError::Validation(format!(
            "dual_causality_loss: shape mismatch {:?} / {:?} / {:?}",
            s_enh,
            g.value(normalized).shape(),
            g.value(corrupted).shape()
        )));
    }
    let e_enh = pixel_entropy(g, enhanced)?;
    let e_norm = pixel_entropy(g, normalized)?;
    let e_corr = pixel_entropy(g, corrupted)?;

    let d_plus = autodiff::sub(g, e_enh, e_norm)?;
    let d_plus = spatial_mean_hw(g, d_plus)?;
    let l_plus = margin_loss(g, d_plus);

    let d_minus = autodiff::sub(g, e_norm, e_corr)?;
    let d_minus = spatial_mean_hw(g, d_minus)?;
    let l_minus = margin_loss(g, d_minus);

    let total = autodiff::add(g, l_plus, l_minus)?;
    Ok(mean_all(g, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, sum_all, DEFAULT_FD_STEP};
    use ndarray::{Array2 as NdArray2, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Array4::from_elem((1, 1, 2, 3), 7.0).into_dyn());
        let y = instance_normalize(&mut g, f, 1e-5).unwrap();
        for &v in g.value(y).iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn instance_norm_two_pixel_channel() {
        // values [1, 3]: mean 2, population std 1 -> [-1, 1] as eps -> 0
        let mut g = Graph::<f64>::new();
        let f = g.constant(
            Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap().into_dyn(),
        );
        let y = instance_normalize(&mut g, f, 1e-12).unwrap();
        let v: Vec<f64> = g.value(y).iter().copied().collect();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn instance_norm_postconditions_hold() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand4((2, 3, 5, 7), 42).into_dyn());
        let y = instance_normalize(&mut g, f, 1e-5).unwrap();
        let yv = g.value(y).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let plane = yv.slice(ndarray::s![n, c, .., ..]);
                let m = plane.mean().unwrap();
                let var = plane.mapv(|v| (v - m) * (v - m)).mean().unwrap();
                assert!(m.abs() < 1e-6, "mean {m}");
                assert!((var.sqrt() - 1.0).abs() < 1e-3, "std {}", var.sqrt());
            }
        }
    }

    #[test]
    fn instance_norm_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let mut arr = Array4::from_elem((1, 1, 2, 2), 1.0);
        arr[(0, 0, 0, 0)] = f64::NAN;
        let f = g.constant(arr.into_dyn());
        assert!(instance_normalize(&mut g, f, 1e-5).is_err());
    }

    #[test]
    fn instance_norm_single_pixel_is_zero() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Array4::from_elem((1, 2, 1, 1), 3.5).into_dyn());
        let y = instance_normalize(&mut g, f, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_zero_params_gives_half() {
        let mut g = Graph::<f64>::new();
        let params = SnrParams::<f64>::zeros(8, 16, 1e-5).unwrap();
        let vars = params.bind_leaf(&mut g);
        let r = g.constant(rand4((3, 8, 4, 4), 1).into_dyn());
        let alpha = channel_attention(&mut g, r, &vars, AttentionMode::PerSample).unwrap();
        assert_eq!(g.value(alpha).shape(), &[3, 8]);
        for &a in g.value(alpha).iter() {
            assert_eq!(a, 0.5);
        }
    }

    #[test]
    fn attention_hand_computed_tiny_fc() {
        // C=2, hidden=1, GAP(R) = [1, 0]; fc1 = [[1],[0]], fc2 = [[2, 0]]
        // -> hidden relu(1) = 1 -> logits [2, 0] -> [sigmoid(2), 0.5]
        let mut g = Graph::<f64>::new();
        let params = SnrParams::<f64> {
            fc1_w: NdArray2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap(),
            fc1_b: ndarray::Array1::zeros(1),
            fc2_w: NdArray2::from_shape_vec((1, 2), vec![2.0, 0.0]).unwrap(),
            fc2_b: ndarray::Array1::zeros(2),
            reduction: 2,
            eps: 1e-5,
        };
        let vars = params.bind_leaf(&mut g);
        let mut r = Array4::<f64>::zeros((1, 2, 2, 2));
        r.slice_mut(ndarray::s![0, 0, .., ..]).fill(1.0);
        let rv = g.constant(r.into_dyn());
        let alpha = channel_attention(&mut g, rv, &vars, AttentionMode::PerSample).unwrap();
        let a: Vec<f64> = g.value(alpha).iter().copied().collect();
        let sig2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((a[0] - sig2).abs() < 1e-12, "{}", a[0]);
        assert!((a[1] - 0.5).abs() < 1e-12, "{}", a[1]);
        assert!((a[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn attention_values_in_open_interval() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = SnrParams::<f64>::init_he(16, 16, 1e-5, &mut rng).unwrap();
        let vars = params.bind_leaf(&mut g);
        let r = g.constant(rand4((2, 16, 3, 3), 10).into_dyn());
        let alpha = channel_attention(&mut g, r, &vars, AttentionMode::PerSample).unwrap();
        for &a in g.value(alpha).iter() {
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn attention_shape_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let params = SnrParams::<f64>::zeros(8, 16, 1e-5).unwrap();
        let vars = params.bind_leaf(&mut g);
        let r = g.constant(rand4((1, 4, 2, 2), 2).into_dyn());
        assert!(channel_attention(&mut g, r, &vars, AttentionMode::PerSample).is_err());
    }

    #[test]
    fn restitution_boundary_and_midpoint() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(rand4((1, 2, 2, 2), 3).into_dyn());
        // alpha = 1 keeps everything in R+
        let a1 = g.constant(NdArray2::from_elem((1, 2), 1.0).into_dyn());
        let (rp, rm) = restitution_split(&mut g, r, a1).unwrap();
        assert_eq!(g.value(rp), g.value(r));
        assert!(g.value(rm).iter().all(|&v| v == 0.0));
        // alpha = 0.5 halves
        let ah = g.constant(NdArray2::from_elem((1, 2), 0.5).into_dyn());
        let (rp, rm) = restitution_split(&mut g, r, ah).unwrap();
        for ((&p, &m), &orig) in
            g.value(rp).iter().zip(g.value(rm).iter()).zip(g.value(r).iter())
        {
            assert!((p - orig / 2.0).abs() < 1e-12);
            assert!((m - orig / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn restitution_quarter_gate() {
        // R channel values [2, -4] with alpha 0.25 -> R+ [0.5, -1], R- [1.5, -3]
        let mut g = Graph::<f64>::new();
        let r = g.constant(
            Array4::from_shape_vec((1, 1, 1, 2), vec![2.0, -4.0]).unwrap().into_dyn(),
        );
        let a = g.constant(NdArray2::from_elem((1, 1), 0.25).into_dyn());
        let (rp, rm) = restitution_split(&mut g, r, a).unwrap();
        let p: Vec<f64> = g.value(rp).iter().copied().collect();
        let m: Vec<f64> = g.value(rm).iter().copied().collect();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(m, vec![1.5, -3.0]);
    }

    #[test]
    fn restitution_rejects_out_of_range_alpha() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(rand4((1, 2, 2, 2), 4).into_dyn());
        for bad in [1.5, -0.2, f64::NAN] {
            let a = g.constant(NdArray2::from_elem((1, 2), bad).into_dyn());
            assert!(restitution_split(&mut g, r, a).is_err(), "alpha {bad} accepted");
        }
    }

    #[test]
    fn snr_forward_partition_identity() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let params = SnrParams::<f64>::init_he(6, 16, 1e-5, &mut rng).unwrap();
        let vars = params.bind_leaf(&mut g);
        let f = g.constant(rand4((2, 6, 4, 5), 21).into_dyn());
        let out = snr_forward(&mut g, f, &vars, 1e-5, AttentionMode::PerSample).unwrap();
        // R+ + R- = F - normalized
        let fv = g.value(f);
        let nv = g.value(out.normalized);
        let rp = g.value(out.residual_plus);
        let rm = g.value(out.residual_minus);
        for (((&a, &b), &c), &d) in fv.iter().zip(nv.iter()).zip(rp.iter()).zip(rm.iter()) {
            assert!(((a - b) - (c + d)).abs() < 1e-10);
        }
        // enhanced + R- = F
        let en = g.value(out.enhanced);
        for ((&e, &m), &orig) in en.iter().zip(rm.iter()).zip(fv.iter()) {
            assert!((e + m - orig).abs() < 1e-10);
        }
    }

    #[test]
    fn snr_forward_fixed_point_of_normalized_input() {
        // Already zero-mean unit-variance input: residual ~ 0, all maps ~ F.
        let mut g = Graph::<f64>::new();
        let mut f = rand4((1, 3, 4, 4), 30);
        for c in 0..3 {
            let mut plane = f.slice_mut(ndarray::s![0, c, .., ..]);
            let m = plane.mean().unwrap();
            plane.mapv_inplace(|v| v - m);
            let var = plane.mapv(|v| v * v).mean().unwrap();
            plane.mapv_inplace(|v| v / var.sqrt());
        }
        let params = SnrParams::<f64>::zeros(3, 16, 1e-9).unwrap();
        let vars = params.bind_leaf(&mut g);
        let fv = g.constant(f.clone().into_dyn());
        let out = snr_forward(&mut g, fv, &vars, 1e-9, AttentionMode::PerSample).unwrap();
        for (&n, &orig) in g.value(out.normalized).iter().zip(f.iter()) {
            assert!((n - orig).abs() < 1e-6);
        }
        for (&e, &orig) in g.value(out.enhanced).iter().zip(f.iter()) {
            assert!((e - orig).abs() < 1e-6);
        }
    }

    #[test]
    fn snr_forward_zero_weights_halves_residual() {
        let mut g = Graph::<f64>::new();
        let params = SnrParams::<f64>::zeros(4, 16, 1e-5).unwrap();
        let vars = params.bind_leaf(&mut g);
        let f = g.constant(rand4((2, 4, 3, 3), 31).into_dyn());
        let out = snr_forward(&mut g, f, &vars, 1e-5, AttentionMode::PerSample).unwrap();
        let fv = g.value(f);
        let nv = g.value(out.normalized);
        let ev = g.value(out.enhanced);
        for ((&orig, &n), &e) in fv.iter().zip(nv.iter()).zip(ev.iter()) {
            assert!((e - (n + (orig - n) / 2.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn pixel_entropy_uniform_and_one_hot() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Array4::<f64>::zeros((1, 2, 1, 1)).into_dyn());
        let e = pixel_entropy(&mut g, f).unwrap();
        assert!((g.value(e)[ndarray::IxDyn(&[0, 0, 0])] - std::f64::consts::LN_2).abs() < 1e-12);

        let f3 = g.constant(Array4::<f64>::zeros((1, 3, 1, 1)).into_dyn());
        let e3 = pixel_entropy(&mut g, f3).unwrap();
        assert!((g.value(e3)[ndarray::IxDyn(&[0, 0, 0])] - 3f64.ln()).abs() < 1e-12);

        let hot = g.constant(
            Array4::from_shape_vec((1, 2, 1, 1), vec![50.0, -50.0]).unwrap().into_dyn(),
        );
        let eh = pixel_entropy(&mut g, hot).unwrap();
        assert!(g.value(eh)[ndarray::IxDyn(&[0, 0, 0])].abs() < 1e-9);
    }

    #[test]
    fn pixel_entropy_bounds_and_single_channel_error() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand4((2, 5, 3, 3), 40).mapv(|v| v * 10.0).into_dyn());
        let e = pixel_entropy(&mut g, f).unwrap();
        let upper = 5f64.ln();
        for &v in g.value(e).iter() {
            assert!(v >= 0.0 && v <= upper + 1e-12);
        }
        let c1 = g.constant(Array4::<f64>::zeros((1, 1, 2, 2)).into_dyn());
        assert!(pixel_entropy(&mut g, c1).is_err());
    }

    #[test]
    fn margin_loss_values() {
        assert!((margin_loss_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((margin_loss_scalar(1.0) - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((margin_loss_scalar(1.0) - 1.3133).abs() < 1e-4);
        let v = margin_loss_scalar(-1000.0);
        assert!(v >= 0.0 && v < 1e-12, "{v}");
        assert!(margin_loss_scalar(1000.0).is_finite());
    }

    #[test]
    fn margin_loss_monotone_and_above_hinge() {
        let xs = [-5.0, -1.0, -0.3, 0.0, 0.4, 2.0, 8.0];
        for w in xs.windows(2) {
            assert!(margin_loss_scalar(w[0]) < margin_loss_scalar(w[1]));
        }
        for &x in &xs {
            assert!(margin_loss_scalar(x) > x.max(0.0));
        }
    }

    #[test]
    fn dual_causality_equal_maps_gives_two_ln_two() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand4((2, 3, 4, 4), 50).into_dyn());
        let l = dual_causality_loss(&mut g, f, f, f).unwrap();
        assert!((g.scalar_value(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dual_causality_composed_oracle_case() {
        // enhanced ~ one-hot (entropy 0), normalized and corrupted uniform
        // (entropy ln 2): L+ = softplus(-ln 2) = ln(3/2), L- = softplus(0)
        // = ln 2, total = ln 3.
        let mut g = Graph::<f64>::new();
        let mut hot = Array4::<f64>::zeros((1, 2, 2, 2));
        hot.slice_mut(ndarray::s![0, 0, .., ..]).fill(50.0);
        hot.slice_mut(ndarray::s![0, 1, .., ..]).fill(-50.0);
        let enhanced = g.constant(hot.into_dyn());
        let uniform = g.constant(Array4::<f64>::zeros((1, 2, 2, 2)).into_dyn());
        let l = dual_causality_loss(&mut g, enhanced, uniform, uniform).unwrap();
        let expected = margin_loss_scalar(-std::f64::consts::LN_2) + margin_loss_scalar(0.0);
        assert!((expected - 3f64.ln()).abs() < 1e-12);
        assert!((g.scalar_value(l) - expected).abs() < 1e-9, "{}", g.scalar_value(l));
    }

    #[test]
    fn dual_causality_strictly_positive_and_validates_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(rand4((2, 3, 3, 3), 60).into_dyn());
        let b = g.constant(rand4((2, 3, 3, 3), 61).into_dyn());
        let c = g.constant(rand4((2, 3, 3, 3), 62).into_dyn());
        let l = dual_causality_loss(&mut g, a, b, c).unwrap();
        assert!(g.scalar_value(l) > 0.0);
        let small = g.constant(rand4((2, 3, 2, 2), 63).into_dyn());
        assert!(dual_causality_loss(&mut g, a, b, small).is_err());
    }

    #[test]
    fn snr_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let params = SnrParams::<f64>::init_he(4, 16, 1e-5, &mut rng).unwrap();
        let f0 = rand4((2, 4, 3, 3), 71).into_dyn();
        let inputs = vec![
            f0,
            params.fc1_w.clone().into_dyn(),
            params.fc1_b.clone().into_dyn(),
            params.fc2_w.clone().into_dyn(),
            params.fc2_b.clone().into_dyn(),
        ];
        let check = check_gradients(
            |g, vars| {
                let pv = SnrParamVars {
                    fc1_w: vars[1],
                    fc1_b: vars[2],
                    fc2_w: vars[3],
                    fc2_b: vars[4],
                };
                let out = snr_forward(g, vars[0], &pv, 1e-5, AttentionMode::PerSample)?;
                dual_causality_loss(g, out.enhanced, out.normalized, out.corrupted)
            },
            &inputs,
            DEFAULT_FD_STEP,
            None,
            0,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "max rel err {:?}", check.worst);
    }

    #[test]
    fn snr_composite_weighted_output_gradients() {
        // Check gradients through every SNR output, not just the loss path.
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let params = SnrParams::<f64>::init_he(4, 16, 1e-5, &mut rng).unwrap();
        let f0 = rand4((1, 4, 3, 3), 81).into_dyn();
        let probe = rand4((1, 4, 3, 3), 82).into_dyn();
        let inputs = vec![f0, params.fc1_w.clone().into_dyn()];
        let fc1_b = params.fc1_b.clone();
        let fc2_w = params.fc2_w.clone();
        let fc2_b = params.fc2_b.clone();
        let check = check_gradients(
            |g, vars| {
                let pv = SnrParamVars {
                    fc1_w: vars[1],
                    fc1_b: g.constant(fc1_b.clone().into_dyn()),
                    fc2_w: g.constant(fc2_w.clone().into_dyn()),
                    fc2_b: g.constant(fc2_b.clone().into_dyn()),
                };
                let out = snr_forward(g, vars[0], &pv, 1e-5, AttentionMode::PerSample)?;
                let w = g.constant(probe.clone().into_dyn());
                let weighted = crate::autodiff::mul(g, out.enhanced, w)?;
                let s1 = sum_all(g, weighted);
                let w2 = g.constant(probe.clone().into_dyn());
                let weighted2 = crate::autodiff::mul(g, out.corrupted, w2)?;
                let s2 = sum_all(g, weighted2);
                crate::autodiff::add(g, s1, s2)
            },
            &inputs,
            DEFAULT_FD_STEP,
            None,
            0,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "max rel err {:?}", check.worst);
    }

    #[test]
    fn permutation_equivariance() {
        // Permuting channels of F and the matching rows/cols of the FC
        // parameters permutes alpha and every output map the same way.
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let c = 6;
        let params = SnrParams::<f64>::init_he(c, 16, 1e-5, &mut rng).unwrap();
        let f = rand4((2, c, 3, 3), 91);
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];

        let run = |f: &Array4<f64>, p: &SnrParams<f64>| {
            let mut g = Graph::<f64>::new();
            let vars = p.bind_leaf(&mut g);
            let fv = g.constant(f.clone().into_dyn());
            let out = snr_forward(&mut g, fv, &vars, 1e-5, AttentionMode::PerSample).unwrap();
            (
                g.value(out.alpha).clone(),
                g.value(out.enhanced).clone(),
                g.value(out.corrupted).clone(),
            )
        };

        let (alpha, enhanced, corrupted) = run(&f, &params);

        let mut f_perm = f.clone();
        let mut p_perm = params.clone();
        for (new_c, &old_c) in perm.iter().enumerate() {
            f_perm
                .slice_mut(ndarray::s![.., new_c, .., ..])
                .assign(&f.slice(ndarray::s![.., old_c, .., ..]));
            p_perm.fc1_w.row_mut(new_c).assign(&params.fc1_w.row(old_c));
            p_perm.fc2_w.column_mut(new_c).assign(&params.fc2_w.column(old_c));
            p_perm.fc2_b[new_c] = params.fc2_b[old_c];
        }
        let (alpha_p, enhanced_p, corrupted_p) = run(&f_perm, &p_perm);

        for n in 0..2 {
            for (new_c, &old_c) in perm.iter().enumerate() {
                let a = alpha[ndarray::IxDyn(&[n, old_c])];
                let b = alpha_p[ndarray::IxDyn(&[n, new_c])];
                assert!((a - b).abs() < 1e-12);
                for y in 0..3 {
                    for x in 0..3 {
                        let e1 = enhanced[ndarray::IxDyn(&[n, old_c, y, x])];
                        let e2 = enhanced_p[ndarray::IxDyn(&[n, new_c, y, x])];
                        assert!((e1 - e2).abs() < 1e-12);
                        let c1 = corrupted[ndarray::IxDyn(&[n, old_c, y, x])];
                        let c2 = corrupted_p[ndarray::IxDyn(&[n, new_c, y, x])];
                        assert!((c1 - c2).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_hidden_width_clamp_rule() {
        assert_eq!(attention_hidden_width(32, 16), 4);
        assert_eq!(attention_hidden_width(64, 16), 4);
        assert_eq!(attention_hidden_width(128, 16), 8);
        assert_eq!(attention_hidden_width(256, 16), 16);
        assert_eq!(attention_hidden_width(2, 16), 2);
        assert_eq!(attention_hidden_width(1, 16), 1);
    }
}
