//! Elementwise, reduction, and linear-algebra ops on the tape.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, Ix4};

use super::{Graph, Var};
use crate::element::Element;
use crate::error::{Result, SrwError};

fn expect_rank<A: Element>(g: &Graph<A>, v: Var, rank: usize, what: &str) -> Result<()> {
    let got = g.value(v).ndim();
    if got != rank {
        return Err(SrwError::Validation(format!("{what}: expected rank {rank}, got {got}")));
    }
    Ok(())
}

fn expect_same_shape<A: Element>(g: &Graph<A>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(SrwError::Validation(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<A: Element>(g: &mut Graph<A>, a: Var, b: Var) -> Result<Var> {
    expect_same_shape(g, a, b, "add")?;
    let value = g.value(a) + g.value(b);
    Ok(g.push_op(
        value,
        vec![a, b],
        Box::new(|_, gout, needs| {
            vec![
                needs[0].then(|| gout.clone()),
                needs[1].then(|| gout.clone()),
            ]
        }),
    ))
}

/// Elementwise difference `a - b`.
pub fn sub<A: Element>(g: &mut Graph<A>, a: Var, b: Var) -> Result<Var> {
    expect_same_shape(g, a, b, "sub")?;
    let value = g.value(a) - g.value(b);
    Ok(g.push_op(
        value,
        vec![a, b],
        Box::new(|_, gout, needs| {
            vec![
                needs[0].then(|| gout.clone()),
                needs[1].then(|| gout.mapv(|v| -v)),
            ]
        }),
    ))
}

/// Elementwise product of two same-shape tensors.
pub fn mul<A: Element>(g: &mut Graph<A>, a: Var, b: Var) -> Result<Var> {
    expect_same_shape(g, a, b, "mul")?;
    let value = g.value(a) * g.value(b);
    Ok(g.push_op(
        value,
        vec![a, b],
        Box::new(move |vals, gout, needs| {
            vec![
                needs[0].then(|| gout * vals.value(b)),
                needs[1].then(|| gout * vals.value(a)),
            ]
        }),
    ))
}

/// Multiplies every element by a fixed scalar.
pub fn scale<A: Element>(g: &mut Graph<A>, x: Var, c: A) -> Var {
    let value = g.value(x).mapv(|v| v * c);
    g.push_op(
        value,
        vec![x],
        Box::new(move |_, gout, _| vec![Some(gout.mapv(|v| v * c))]),
    )
}

/// Rectified linear unit. The subgradient at exactly zero is taken as zero.
pub fn relu<A: Element>(g: &mut Graph<A>, x: Var) -> Var {
    let value = g.value(x).mapv(|v| if v > A::zero() { v } else { A::zero() });
    g.push_op(
        value,
        vec![x],
        Box::new(move |vals, gout, _| {
            let x_val = vals.value(x);
            let mut grad = gout.clone();
            grad.zip_mut_with(x_val, |gv, &xv| {
                if xv <= A::zero() {
                    *gv = A::zero();
                }
            });
            vec![Some(grad)]
        }),
    )
}

/// Logistic sigmoid.
pub fn sigmoid<A: Element>(g: &mut Graph<A>, x: Var) -> Var {
    let out_id = g.next_id();
    let value = g.value(x).mapv(sigmoid_scalar);
    g.push_op(
        value,
        vec![x],
        Box::new(move |vals, gout, _| {
            let y = vals.value(out_id);
            let mut grad = gout.clone();
            grad.zip_mut_with(y, |gv, &yv| *gv = *gv * yv * (A::one() - yv));
            vec![Some(grad)]
        }),
    )
}

pub(crate) fn sigmoid_scalar<A: Element>(v: A) -> A {
    if v >= A::zero() {
        A::one() / (A::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (A::one() + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub(crate) fn softplus_scalar<A: Element>(v: A) -> A {
    if v > A::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Elementwise softplus; the smooth margin penalty used by the entropy losses.
pub fn softplus<A: Element>(g: &mut Graph<A>, x: Var) -> Var {
    let value = g.value(x).mapv(softplus_scalar);
    g.push_op(
        value,
        vec![x],
        Box::new(move |vals, gout, _| {
            let x_val = vals.value(x);
            let mut grad = gout.clone();
            grad.zip_mut_with(x_val, |gv, &xv| *gv = *gv * sigmoid_scalar(xv));
            vec![Some(grad)]
        }),
    )
}

/// Elementwise absolute value; subgradient at zero is zero.
pub fn abs<A: Element>(g: &mut Graph<A>, x: Var) -> Var {
    let value = g.value(x).mapv(|v| v.abs());
    g.push_op(
        value,
        vec![x],
        Box::new(move |vals, gout, _| {
            let x_val = vals.value(x);
            let mut grad = gout.clone();
            grad.zip_mut_with(x_val, |gv, &xv| *gv = *gv * sign(xv));
            vec![Some(grad)]
        }),
    )
}

fn sign<A: Element>(v: A) -> A {
    if v > A::zero() {
        A::one()
    } else if v < A::zero() {
        -A::one()
    } else {
        A::zero()
    }
}

/// Sum of all elements (rank-0 output).
pub fn sum_all<A: Element>(g: &mut Graph<A>, x: Var) -> Var {
    let value = ndarray::arr0(g.value(x).sum()).into_dyn();
    let shape = g.value(x).raw_dim();
    g.push_op(
        value,
        vec![x],
        Box::new(move |_, gout, _| {
            let s = gout[ndarray::IxDyn(&[])];
            vec![Some(ArrayD::from_elem(shape.clone(), s))]
        }),
    )
}

/// Mean of all elements (rank-0 output).
pub fn mean_all<A: Element>(g: &mut Graph<A>, x: Var) -> Var {
    let n = g.value(x).len();
    let s = sum_all(g, x);
    scale(g, s, A::one() / A::lit(n as f64))
}

/// Mean over the leading axis; `[N, rest..] -> [rest..]`.
pub fn mean_axis0<A: Element>(g: &mut Graph<A>, x: Var) -> Result<Var> {
    let v = g.value(x);
    if v.ndim() < 1 || v.shape()[0] == 0 {
        return Err(SrwError::Validation("mean_axis0: empty leading axis".into()));
    }
    let n = v.shape()[0];
    let shape = v.raw_dim();
    let value = v.mean_axis(Axis(0)).expect("non-empty axis");
    Ok(g.push_op(
        value,
        vec![x],
        Box::new(move |_, gout, _| {
            let inv = A::one() / A::lit(n as f64);
            let mut grad = ArrayD::zeros(shape.clone());
            for mut lane in grad.axis_iter_mut(Axis(0)) {
                lane.zip_mut_with(gout, |dst, &gv| *dst = gv * inv);
            }
            vec![Some(grad)]
        }),
    ))
}

/// Per-sample spatial mean; `[N, H, W] -> [N]`.
pub fn spatial_mean_hw<A: Element>(g: &mut Graph<A>, x: Var) -> Result<Var> {
    expect_rank(g, x, 3, "spatial_mean_hw")?;
    let v = g.value(x).view().into_dimensionality::<Ix3>().expect("rank checked");
    let (n, h, w) = v.dim();
    let inv = A::one() / A::lit((h * w) as f64);
    let mut out = Array1::<A>::zeros(n);
    for (i, plane) in v.outer_iter().enumerate() {
        out[i] = plane.sum() * inv;
    }
    Ok(g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |_, gout, _| {
            let mut grad = Array3::<A>::zeros((n, h, w));
            for (i, mut plane) in grad.outer_iter_mut().enumerate() {
                plane.fill(gout[ndarray::IxDyn(&[i])] * inv);
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}

/// Reshape preserving element count.
pub fn reshape<A: Element>(g: &mut Graph<A>, x: Var, shape: &[usize]) -> Result<Var> {
    let v = g.value(x);
    if v.len() != shape.iter().product::<usize>() {
        return Err(SrwError::Validation(format!(
            "reshape: cannot view {:?} as {:?}",
            v.shape(),
            shape
        )));
    }
    let old_shape = v.raw_dim();
    let value = v
        .to_owned()
        .into_shape_with_order(ndarray::IxDyn(shape))
        .map_err(|e| SrwError::Validation(format!("reshape: {e}")))?;
    Ok(g.push_op(
        value,
        vec![x],
        Box::new(move |_, gout, _| {
            let grad = gout
                .to_owned()
                .into_shape_with_order(old_shape.clone())
                .expect("inverse reshape");
            vec![Some(grad)]
        }),
    ))
}

/// 2-D matrix product `a @ b`.
pub fn matmul<A: Element>(g: &mut Graph<A>, a: Var, b: Var) -> Result<Var> {
    expect_rank(g, a, 2, "matmul lhs")?;
    expect_rank(g, b, 2, "matmul rhs")?;
    let av = g.value(a).view().into_dimensionality::<Ix2>().expect("rank checked");
    let bv = g.value(b).view().into_dimensionality::<Ix2>().expect("rank checked");
    if av.dim().1 != bv.dim().0 {
        return Err(SrwError::Validation(format!(
            "matmul: inner dims differ, {:?} vs {:?}",
            av.dim(),
            bv.dim()
        )));
    }
    let value = av.dot(&bv).into_dyn();
    Ok(g.push_op(
        value,
        vec![a, b],
        Box::new(move |vals, gout, needs| {
            let gv = gout.view().into_dimensionality::<Ix2>().expect("matmul grad rank");
            let av = vals.value(a).view().into_dimensionality::<Ix2>().expect("lhs rank");
            let bv = vals.value(b).view().into_dimensionality::<Ix2>().expect("rhs rank");
            let da = needs[0].then(|| gv.dot(&bv.t()).into_dyn());
            let db = needs[1].then(|| av.t().dot(&gv).into_dyn());
            vec![da, db]
        }),
    ))
}

/// Affine layer `x @ w + bias` with `x: [N, K]`, `w: [K, M]`, `bias: [M]`.
pub fn linear<A: Element>(g: &mut Graph<A>, x: Var, w: Var, bias: Var) -> Result<Var> {
    expect_rank(g, x, 2, "linear input")?;
    expect_rank(g, w, 2, "linear weight")?;
    expect_rank(g, bias, 1, "linear bias")?;
    let xv = g.value(x).view().into_dimensionality::<Ix2>().expect("rank checked");
    let wv = g.value(w).view().into_dimensionality::<Ix2>().expect("rank checked");
    let bv = g.value(bias).view().into_dimensionality::<ndarray::Ix1>().expect("rank checked");
    let (n, k) = xv.dim();
    let (k2, m) = wv.dim();
    if k != k2 || bv.len() != m {
        return Err(SrwError::Validation(format!(
            "linear: incompatible shapes x[{n},{k}] w[{k2},{m}] bias[{}]",
            bv.len()
        )));
    }
    let mut value = xv.dot(&wv);
    value += &bv.broadcast((n, m)).expect("bias broadcast");
    Ok(g.push_op(
        value.into_dyn(),
        vec![x, w, bias],
        Box::new(move |vals, gout, needs| {
            let gv = gout.view().into_dimensionality::<Ix2>().expect("linear grad rank");
            let xv = vals.value(x).view().into_dimensionality::<Ix2>().expect("x rank");
            let wv = vals.value(w).view().into_dimensionality::<Ix2>().expect("w rank");
            let dx = needs[0].then(|| gv.dot(&wv.t()).into_dyn());
            let dw = needs[1].then(|| xv.t().dot(&gv).into_dyn());
            let db = needs[2].then(|| gv.sum_axis(Axis(0)).into_dyn());
            vec![dx, dw, db]
        }),
    ))
}

/// Per-(sample, channel) standardization over spatial positions with no
/// learned affine: `y = (x - mean) / sqrt(var + eps)`.
///
/// Rejects non-finite inputs. A single spatial position (or a constant
/// channel) yields zeros: the variance term degenerates and eps dominates.
pub fn instance_norm<A: Element>(g: &mut Graph<A>, x: Var, eps: A) -> Result<Var> {
    expect_rank(g, x, 4, "instance_norm")?;
    if eps <= A::zero() {
        return Err(SrwError::Validation("instance_norm: eps must be positive".into()));
    }
    if g.value(x).iter().any(|v| !v.is_finite()) {
        return Err(SrwError::Validation("instance_norm: non-finite input".into()));
    }
    let xv = g.value(x).view().into_dimensionality::<Ix4>().expect("rank checked");
    let (n, c, h, w) = xv.dim();
    let m = A::lit((h * w) as f64);
    let mut out = ndarray::Array4::<A>::zeros((n, c, h, w));
    let mut inv_std = Array2::<A>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let plane = xv.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), ch);
            let mean = plane.sum() / m;
            let mut var = A::zero();
            for &v in plane.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / m;
            let is = A::one() / (var + eps).sqrt();
            inv_std[(i, ch)] = is;
            let mut dst = out.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ch);
            dst.zip_mut_with(&plane, |d, &v| *d = (v - mean) * is);
        }
    }
    let out_id = g.next_id();
    Ok(g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |vals, gout, _| {
            // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)) per (n, c)
            let xhat = vals.value(out_id).view().into_dimensionality::<Ix4>().expect("out rank");
            let gv = gout.view().into_dimensionality::<Ix4>().expect("grad rank");
            let mut grad = ndarray::Array4::<A>::zeros((n, c, h, w));
            for i in 0..n {
                for ch in 0..c {
                    let gp = gv.index_axis(Axis(0), i);
                    let gp = gp.index_axis(Axis(0), ch);
                    let xp = xhat.index_axis(Axis(0), i);
                    let xp = xp.index_axis(Axis(0), ch);
                    let g_mean = gp.sum() / m;
                    let mut gx_mean = A::zero();
                    for (&gv, &xv) in gp.iter().zip(xp.iter()) {
                        gx_mean = gx_mean + gv * xv;
                    }
                    gx_mean = gx_mean / m;
                    let is = inv_std[(i, ch)];
                    let mut dst = grad.index_axis_mut(Axis(0), i);
                    let mut dst = dst.index_axis_mut(Axis(0), ch);
                    ndarray::Zip::from(&mut dst).and(&gp).and(&xp).for_each(|d, &gv, &xv| {
                        *d = is * (gv - g_mean - xv * gx_mean);
                    });
                }
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}

/// Spatial global average pooling; `[N, C, H, W] -> [N, C]`.
pub fn spatial_gap<A: Element>(g: &mut Graph<A>, x: Var) -> Result<Var> {
    expect_rank(g, x, 4, "spatial_gap")?;
    let xv = g.value(x).view().into_dimensionality::<Ix4>().expect("rank checked");
    let (n, c, h, w) = xv.dim();
    let inv = A::one() / A::lit((h * w) as f64);
    let mut out = Array2::<A>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            out[(i, ch)] = xv.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum() * inv;
        }
    }
    Ok(g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |_, gout, _| {
            let gv = gout.view().into_dimensionality::<Ix2>().expect("grad rank");
            let mut grad = ndarray::Array4::<A>::zeros((n, c, h, w));
            for i in 0..n {
                for ch in 0..c {
                    let mut plane = grad.index_axis_mut(Axis(0), i);
                    let mut plane = plane.index_axis_mut(Axis(0), ch);
                    plane.fill(gv[(i, ch)] * inv);
                }
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}

/// Broadcasts `[N, C]` to `[N, C, H, W]`.
pub fn broadcast_spatial<A: Element>(g: &mut Graph<A>, x: Var, h: usize, w: usize) -> Result<Var> {
    expect_rank(g, x, 2, "broadcast_spatial")?;
    let xv = g.value(x).view().into_dimensionality::<Ix2>().expect("rank checked");
    let (n, c) = xv.dim();
    let mut out = ndarray::Array4::<A>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            out.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), ch).fill(xv[(i, ch)]);
        }
    }
    Ok(g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |_, gout, _| {
            let gv = gout.view().into_dimensionality::<Ix4>().expect("grad rank");
            let mut grad = Array2::<A>::zeros((n, c));
            for i in 0..n {
                for ch in 0..c {
                    grad[(i, ch)] = gv.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
                }
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}

/// Multiplies each channel by a per-(sample, channel) factor. `alpha` is
/// `[N, C]`, or `[1, C]` to share one factor vector across the batch.
pub fn scale_channels<A: Element>(g: &mut Graph<A>, x: Var, alpha: Var) -> Result<Var> {
    expect_rank(g, x, 4, "scale_channels input")?;
    expect_rank(g, alpha, 2, "scale_channels alpha")?;
    let xv = g.value(x).view().into_dimensionality::<Ix4>().expect("rank checked");
    let av = g.value(alpha).view().into_dimensionality::<Ix2>().expect("rank checked");
    let (n, c, h, w) = xv.dim();
    let (an, ac) = av.dim();
    if ac != c || (an != n && an != 1) {
        return Err(SrwError::Validation(format!(
            "scale_channels: alpha [{an},{ac}] incompatible with features [{n},{c},{h},{w}]"
        )));
    }
    let shared = an == 1;
    let mut out = ndarray::Array4::<A>::zeros((n, c, h, w));
    for i in 0..n {
        let ai = if shared { 0 } else { i };
        for ch in 0..c {
            let factor = av[(ai, ch)];
            let src = xv.index_axis(Axis(0), i);
            let src = src.index_axis(Axis(0), ch);
            let mut dst = out.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ch);
            dst.zip_mut_with(&src, |d, &v| *d = v * factor);
        }
    }
    Ok(g.push_op(
        out.into_dyn(),
        vec![x, alpha],
        Box::new(move |vals, gout, needs| {
            let gv = gout.view().into_dimensionality::<Ix4>().expect("grad rank");
            let xv = vals.value(x).view().into_dimensionality::<Ix4>().expect("x rank");
            let av = vals.value(alpha).view().into_dimensionality::<Ix2>().expect("alpha rank");
            let dx = needs[0].then(|| {
                let mut grad = ndarray::Array4::<A>::zeros((n, c, h, w));
                for i in 0..n {
                    let ai = if shared { 0 } else { i };
                    for ch in 0..c {
                        let factor = av[(ai, ch)];
                        let src = gv.index_axis(Axis(0), i);
                        let src = src.index_axis(Axis(0), ch);
                        let mut dst = grad.index_axis_mut(Axis(0), i);
                        let mut dst = dst.index_axis_mut(Axis(0), ch);
                        dst.zip_mut_with(&src, |d, &v| *d = v * factor);
                    }
                }
                grad.into_dyn()
            });
            let da = needs[1].then(|| {
                let mut grad = Array2::<A>::zeros((if shared { 1 } else { n }, c));
                for i in 0..n {
                    let ai = if shared { 0 } else { i };
                    for ch in 0..c {
                        let gp = gv.index_axis(Axis(0), i);
                        let gp = gp.index_axis(Axis(0), ch);
                        let xp = xv.index_axis(Axis(0), i);
                        let xp = xp.index_axis(Axis(0), ch);
                        let mut acc = A::zero();
                        for (&a, &b) in gp.iter().zip(xp.iter()) {
                            acc = acc + a * b;
                        }
                        grad[(ai, ch)] = grad[(ai, ch)] + acc;
                    }
                }
                grad.into_dyn()
            });
            vec![dx, da]
        }),
    ))
}

/// Softmax over the channel axis of `[N, C, H, W]`.
pub fn softmax_channels<A: Element>(g: &mut Graph<A>, x: Var) -> Result<Var> {
    expect_rank(g, x, 4, "softmax_channels")?;
    let xv = g.value(x).view().into_dimensionality::<Ix4>().expect("rank checked");
    let value = softmax_channels_array(&xv);
    let out_id = g.next_id();
    Ok(g.push_op(
        value.into_dyn(),
        vec![x],
        Box::new(move |vals, gout, _| {
            let p = vals.value(out_id).view().into_dimensionality::<Ix4>().expect("out rank");
            let gv = gout.view().into_dimensionality::<Ix4>().expect("grad rank");
            let (n, c, h, w) = p.dim();
            let mut grad = ndarray::Array4::<A>::zeros((n, c, h, w));
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let mut dot = A::zero();
                        for ch in 0..c {
                            dot = dot + gv[(i, ch, y, xx)] * p[(i, ch, y, xx)];
                        }
                        for ch in 0..c {
                            grad[(i, ch, y, xx)] =
                                p[(i, ch, y, xx)] * (gv[(i, ch, y, xx)] - dot);
                        }
                    }
                }
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}

pub(crate) fn softmax_channels_array<A: Element>(
    x: &ndarray::ArrayView4<'_, A>,
) -> ndarray::Array4<A> {
    let (n, c, h, w) = x.dim();
    let mut out = ndarray::Array4::<A>::zeros((n, c, h, w));
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut maxv = x[(i, 0, y, xx)];
                for ch in 1..c {
                    maxv = maxv.max(x[(i, ch, y, xx)]);
                }
                let mut total = A::zero();
                for ch in 0..c {
                    let e = (x[(i, ch, y, xx)] - maxv).exp();
                    out[(i, ch, y, xx)] = e;
                    total = total + e;
                }
                for ch in 0..c {
                    out[(i, ch, y, xx)] = out[(i, ch, y, xx)] / total;
                }
            }
        }
    }
    out
}

/// Per-pixel entropy of the channel softmax; `[N, C, H, W] -> [N, H, W]`.
///
/// Values lie in `[0, ln C]`. Requires at least two channels; with one
/// channel the distribution is degenerate and the entropy identically zero.
pub fn channel_entropy<A: Element>(g: &mut Graph<A>, x: Var) -> Result<Var> {
    expect_rank(g, x, 4, "channel_entropy")?;
    let xv = g.value(x).view().into_dimensionality::<Ix4>().expect("rank checked");
    let (n, c, h, w) = xv.dim();
    if c < 2 {
        return Err(SrwError::Validation(
            "channel_entropy: needs at least 2 channels (C=1 is degenerate)".into(),
        ));
    }
    let p = softmax_channels_array(&xv);
    let mut out = Array3::<A>::zeros((n, h, w));
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut e = A::zero();
                for ch in 0..c {
                    let pv = p[(i, ch, y, xx)];
                    if pv > A::zero() {
                        e = e - pv * pv.ln();
                    }
                }
                out[(i, y, xx)] = e;
            }
        }
    }
    let out_id = g.next_id();
    Ok(g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |vals, gout, _| {
            // de/dz_i = -p_i (ln p_i + e); softmax recomputed from the input.
            let xv = vals.value(x).view().into_dimensionality::<Ix4>().expect("x rank");
            let e = vals.value(out_id).view().into_dimensionality::<Ix3>().expect("out rank");
            let gv = gout.view().into_dimensionality::<Ix3>().expect("grad rank");
            let p = softmax_channels_array(&xv);
            let mut grad = ndarray::Array4::<A>::zeros((n, c, h, w));
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let gpx = gv[(i, y, xx)];
                        let ent = e[(i, y, xx)];
                        for ch in 0..c {
                            let pv = p[(i, ch, y, xx)];
                            if pv > A::zero() {
                                grad[(i, ch, y, xx)] = -gpx * pv * (pv.ln() + ent);
                            }
                        }
                    }
                }
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}

/// Subtracts the per-(sample, channel) spatial mean.
pub fn center_spatial<A: Element>(g: &mut Graph<A>, x: Var) -> Result<Var> {
    expect_rank(g, x, 4, "center_spatial")?;
    let xv = g.value(x).view().into_dimensionality::<Ix4>().expect("rank checked");
    let (n, c, h, w) = xv.dim();
    let m = A::lit((h * w) as f64);
    let mut out = ndarray::Array4::<A>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let plane = xv.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), ch);
            let mean = plane.sum() / m;
            let mut dst = out.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ch);
            dst.zip_mut_with(&plane, |d, &v| *d = v - mean);
        }
    }
    Ok(g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |_, gout, _| {
            let gv = gout.view().into_dimensionality::<Ix4>().expect("grad rank");
            let mut grad = ndarray::Array4::<A>::zeros((n, c, h, w));
            for i in 0..n {
                for ch in 0..c {
                    let gp = gv.index_axis(Axis(0), i);
                    let gp = gp.index_axis(Axis(0), ch);
                    let g_mean = gp.sum() / m;
                    let mut dst = grad.index_axis_mut(Axis(0), i);
                    let mut dst = dst.index_axis_mut(Axis(0), ch);
                    dst.zip_mut_with(&gp, |d, &v| *d = v - g_mean);
                }
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}

/// Per-sample channel Gram matrix scaled by the pixel count:
/// `[N, C, H, W] -> [N, C, C]` with `theta_n = M M^T / (H W)`.
pub fn covariance_nchw<A: Element>(g: &mut Graph<A>, x: Var) -> Result<Var> {
    expect_rank(g, x, 4, "covariance")?;
    let xv = g.value(x).view().into_dimensionality::<Ix4>().expect("rank checked");
    let (n, c, h, w) = xv.dim();
    let inv = A::one() / A::lit((h * w) as f64);
    let mut out = Array3::<A>::zeros((n, c, c));
    for i in 0..n {
        let flat = xv
            .index_axis(Axis(0), i)
            .into_shape_with_order((c, h * w))
            .expect("contiguous sample");
        let mut theta = out.index_axis_mut(Axis(0), i);
        general_mat_mul(inv, &flat, &flat.t(), A::zero(), &mut theta);
    }
    Ok(g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |vals, gout, _| {
            // dM = (G + G^T) M / (HW)
            let xv = vals.value(x).view().into_dimensionality::<Ix4>().expect("x rank");
            let gv = gout.view().into_dimensionality::<Ix3>().expect("grad rank");
            let mut grad = ndarray::Array4::<A>::zeros((n, c, h, w));
            for i in 0..n {
                let gm = gv.index_axis(Axis(0), i);
                let sym = &gm + &gm.t();
                let flat = xv
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((c, h * w))
                    .expect("contiguous sample");
                let mut dflat = grad
                    .index_axis_mut(Axis(0), i)
                    .into_shape_with_order((c, h * w))
                    .expect("contiguous grad");
                general_mat_mul(inv, &sym, &flat, A::zero(), &mut dflat);
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<A: Element>(g: &mut Graph<A>, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(SrwError::Validation("concat_channels: no inputs".into()));
    }
    let mut channels = Vec::with_capacity(parts.len());
    for &p in parts {
        expect_rank(g, p, 4, "concat_channels input")?;
        channels.push(g.value(p).shape()[1]);
    }
    let first = g.value(parts[0]).shape().to_vec();
    for &p in &parts[1..] {
        let s = g.value(p).shape();
        if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
            return Err(SrwError::Validation(format!(
                "concat_channels: incompatible shapes {:?} vs {:?}",
                first, s
            )));
        }
    }
    let views: Vec<_> = parts.iter().map(|&p| g.value(p).view()).collect();
    let value =
        ndarray::concatenate(Axis(1), &views).map_err(|e| SrwError::Validation(e.to_string()))?;
    Ok(g.push_op(
        value,
        parts.to_vec(),
        Box::new(move |_, gout, needs| {
            let mut grads = Vec::with_capacity(channels.len());
            let mut offset = 0;
            for (i, &ch) in channels.iter().enumerate() {
                grads.push(needs[i].then(|| {
                    gout.slice_axis(Axis(1), ndarray::Slice::from(offset..offset + ch)).to_owned()
                }));
                offset += ch;
            }
            grads
        }),
    ))
}

/// Concatenates two tensors along the leading axis.
pub fn concat_axis0<A: Element>(g: &mut Graph<A>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.value(a).shape().to_vec(), g.value(b).shape().to_vec());
    if sa[1..] != sb[1..] {
        return Err(SrwError::Validation(format!(
            "concat_axis0: trailing dims differ, {:?} vs {:?}",
            sa, sb
        )));
    }
    let value = ndarray::concatenate(Axis(0), &[g.value(a).view(), g.value(b).view()])
        .map_err(|e| SrwError::Validation(e.to_string()))?;
    let na = sa[0];
    let nb = sb[0];
    Ok(g.push_op(
        value,
        vec![a, b],
        Box::new(move |_, gout, needs| {
            let da = needs[0]
                .then(|| gout.slice_axis(Axis(0), ndarray::Slice::from(0..na)).to_owned());
            let db = needs[1]
                .then(|| gout.slice_axis(Axis(0), ndarray::Slice::from(na..na + nb)).to_owned());
            vec![da, db]
        }),
    ))
}

/// Mean pixelwise cross-entropy between logits `[N, K, H, W]` and integer
/// class targets `[N, H, W]`.
pub fn cross_entropy_logits<A: Element>(
    g: &mut Graph<A>,
    logits: Var,
    target: &Array3<u8>,
) -> Result<Var> {
    expect_rank(g, logits, 4, "cross_entropy logits")?;
    let lv = g.value(logits).view().into_dimensionality::<Ix4>().expect("rank checked");
    let (n, k, h, w) = lv.dim();
    if target.dim() != (n, h, w) {
        return Err(SrwError::Validation(format!(
            "cross_entropy: target shape {:?} does not match logits {:?}",
            target.dim(),
            lv.dim()
        )));
    }
    if target.iter().any(|&t| (t as usize) >= k) {
        return Err(SrwError::Validation(format!(
            "cross_entropy: target class out of range for {k} classes"
        )));
    }
    let count = A::lit((n * h * w) as f64);
    let mut total = A::zero();
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut maxv = lv[(i, 0, y, xx)];
                for ch in 1..k {
                    maxv = maxv.max(lv[(i, ch, y, xx)]);
                }
                let mut lse = A::zero();
                for ch in 0..k {
                    lse = lse + (lv[(i, ch, y, xx)] - maxv).exp();
                }
                let lse = lse.ln() + maxv;
                total = total + lse - lv[(i, target[(i, y, xx)] as usize, y, xx)];
            }
        }
    }
    let value = ndarray::arr0(total / count).into_dyn();
    let target = target.clone();
    Ok(g.push_op(
        value,
        vec![logits],
        Box::new(move |vals, gout, _| {
            let gscale = gout[ndarray::IxDyn(&[])] / count;
            let lv = vals.value(logits).view().into_dimensionality::<Ix4>().expect("logits rank");
            let p = softmax_channels_array(&lv);
            let mut grad = ndarray::Array4::<A>::zeros((n, k, h, w));
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let t = target[(i, y, xx)] as usize;
                        for ch in 0..k {
                            let indicator = if ch == t { A::one() } else { A::zero() };
                            grad[(i, ch, y, xx)] = (p[(i, ch, y, xx)] - indicator) * gscale;
                        }
                    }
                }
            }
            vec![Some(grad.into_dyn())]
        }),
    ))
}
