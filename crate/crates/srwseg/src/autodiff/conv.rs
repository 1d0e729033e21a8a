//! Convolution and resampling ops. Per-sample work is dispatched through
//! [`crate::exec`], so these are the crate's main parallel hot spots.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, Axis, Ix4};

use super::{Graph, Var};
use crate::element::Element;
use crate::error::{Result, SrwError};
use crate::exec;
use crate::kernels::{bilinear_resize2d, bilinear_resize2d_adjoint, col2im, im2col, ConvGeom};

/// Stride / padding / dilation of a [`conv2d`] call. Kernel size comes from
/// the weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Conv2dSpec { stride: 1, padding: 0, dilation: 1 }
    }

    pub fn same3x3() -> Self {
        Conv2dSpec { stride: 1, padding: 1, dilation: 1 }
    }

    fn geom(&self, kh: usize, kw: usize) -> ConvGeom {
        ConvGeom { kh, kw, stride: self.stride, padding: self.padding, dilation: self.dilation }
    }
}

/// 2-D convolution: `x [N, Cin, H, W]`, `w [Cout, Cin, kh, kw]`, `b [Cout]`.
///
/// Implemented as im2col + GEMM per sample; the unfolded column buffers are
/// kept for the backward pass.
pub fn conv2d<A: Element>(
    g: &mut Graph<A>,
    x: Var,
    w: Var,
    b: Var,
    spec: Conv2dSpec,
) -> Result<Var> {
    let xv = g
        .value(x)
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| SrwError::Validation("conv2d: input must be rank 4".into()))?;
    let wv = g
        .value(w)
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| SrwError::Validation("conv2d: weight must be rank 4".into()))?;
    let (n, cin, h, wdt) = xv.dim();
    let (cout, cin_w, kh, kw) = wv.dim();
    if cin != cin_w {
        return Err(SrwError::Validation(format!(
            "conv2d: input has {cin} channels but weight expects {cin_w}"
        )));
    }
    if g.value(b).shape() != [cout] {
        return Err(SrwError::Validation(format!(
            "conv2d: bias shape {:?} does not match {cout} output channels",
            g.value(b).shape()
        )));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(SrwError::Validation("conv2d: stride and dilation must be >= 1".into()));
    }
    let geom = spec.geom(kh, kw);
    if !geom.fits(h, wdt) {
        return Err(SrwError::Validation(format!(
            "conv2d: {kh}x{kw} kernel (dilation {}) does not fit {h}x{wdt} input with padding {}",
            spec.dilation, spec.padding
        )));
    }
    let (oh, ow) = geom.out_dim(h, wdt);

    let wmat = wv.into_shape_with_order((cout, cin * kh * kw)).expect("contiguous weight").to_owned();
    let cols: Vec<Array2<A>> = exec::map_indexed(n, |i| {
        let mut col = Array2::<A>::zeros((cin * kh * kw, oh * ow));
        im2col(&xv.index_axis(Axis(0), i), &geom, &mut col.view_mut());
        col
    });

    let bias = g
        .value(b)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("bias rank checked")
        .to_owned();
    let mut out = Array4::<A>::zeros((n, cout, oh, ow));
    {
        let out_views: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
        exec::for_each_indexed(out_views, |i, view| {
            let mut flat = view.into_shape_with_order((cout, oh * ow)).expect("contiguous out");
            general_mat_mul(A::one(), &wmat, &cols[i].view(), A::zero(), &mut flat);
            for (mut row, &bv) in flat.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        });
    }

    Ok(g.push_op(
        out.into_dyn(),
        vec![x, w, b],
        Box::new(move |_, gout, needs| {
            let gv = gout.view().into_dimensionality::<Ix4>().expect("conv grad rank");
            let dx = needs[0].then(|| {
                let mut grad = Array4::<A>::zeros((n, cin, h, wdt));
                let views: Vec<_> = grad.axis_iter_mut(Axis(0)).collect();
                exec::for_each_indexed(views, |i, mut view| {
                    let gflat = gv
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((cout, oh * ow))
                        .expect("contiguous grad");
                    let mut dcol = Array2::<A>::zeros((cin * kh * kw, oh * ow));
                    general_mat_mul(A::one(), &wmat.t(), &gflat, A::zero(), &mut dcol.view_mut());
                    col2im(&dcol.view(), &geom, &mut view);
                });
                grad.into_dyn()
            });
            let dw = needs[1].then(|| {
                let partials: Vec<Array2<A>> = exec::map_indexed(n, |i| {
                    let gflat = gv
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((cout, oh * ow))
                        .expect("contiguous grad");
                    let mut dwm = Array2::<A>::zeros((cout, cin * kh * kw));
                    general_mat_mul(A::one(), &gflat, &cols[i].t(), A::zero(), &mut dwm);
                    dwm
                });
                let mut acc = Array2::<A>::zeros((cout, cin * kh * kw));
                for p in partials {
                    acc += &p;
                }
                acc.into_shape_with_order((cout, cin_w, kh, kw)).expect("weight shape").into_dyn()
            });
            let db = needs[2].then(|| {
                let mut acc = ndarray::Array1::<A>::zeros(cout);
                for i in 0..n {
                    for ch in 0..cout {
                        acc[ch] =
                            acc[ch] + gv.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
                    }
                }
                acc.into_dyn()
            });
            vec![dx, dw, db]
        }),
    ))
}

/// Bilinear resize of `[N, C, H, W]` to a new spatial size.
pub fn bilinear_resize<A: Element>(
    g: &mut Graph<A>,
    x: Var,
    out_hw: (usize, usize),
) -> Result<Var> {
    let xv = g
        .value(x)
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| SrwError::Validation("bilinear_resize: input must be rank 4".into()))?;
    let (n, c, h, w) = xv.dim();
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(SrwError::Validation("bilinear_resize: zero output size".into()));
    }
    let mut out = Array4::<A>::zeros((n, c, oh, ow));
    {
        let views: Vec<_> = out.axis_iter_mut(Axis(0)).collect();
        exec::for_each_indexed(views, |i, mut view| {
            for ch in 0..c {
                let plane = xv.index_axis(Axis(0), i);
                let resized = bilinear_resize2d(&plane.index_axis(Axis(0), ch), oh, ow);
                view.index_axis_mut(Axis(0), ch).assign(&resized);
            }
        });
    }
    Ok(g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |_, gout, _| {
            let gv = gout.view().into_dimensionality::<Ix4>().expect("resize grad rank");
            let mut grad = Array4::<A>::zeros((n, c, h, w));
            let views: Vec<_> = grad.axis_iter_mut(Axis(0)).collect();
            exec::for_each_indexed(views, |i, mut view| {
                for ch in 0..c {
                    let gp = gv.index_axis(Axis(0), i);
                    let back = bilinear_resize2d_adjoint(&gp.index_axis(Axis(0), ch), h, w);
                    view.index_axis_mut(Axis(0), ch).assign(&back);
                }
            });
            vec![Some(grad.into_dyn())]
        }),
    ))
}
