//! Low-level numeric kernels: separable Gaussian blur, bilinear resampling
//! (with adjoint), and im2col/col2im for convolutions.
//!
//! These are plain array routines with no graph bookkeeping; the autodiff ops
//! and the synthetic-data generator both build on them.

use ndarray::{Array2, ArrayView2, ArrayView3, ArrayViewMut2, ArrayViewMut3};

use crate::element::Element;

/// 1-D Gaussian taps for the given sigma, normalized to sum 1.
/// Radius is `ceil(3*sigma)`, at least 1. A sigma at or below 1e-4 means
/// "no blur" and yields a single unit tap.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 1e-4 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let radius = radius.max(1);
    let mut taps = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = -0.5 / (sigma * sigma);
    for i in -radius..=radius {
        taps.push(((i * i) as f64 * inv).exp());
    }
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Separable Gaussian blur with clamp-to-edge padding.
pub fn gaussian_blur2d<A: Element>(src: &ArrayView2<'_, A>, sigma: f64) -> Array2<A> {
    let taps64 = gaussian_taps(sigma);
    if taps64.len() == 1 {
        return src.to_owned();
    }
    let taps: Vec<A> = taps64.iter().map(|&t| A::lit(t)).collect();
    let radius = (taps.len() / 2) as i64;
    let (h, w) = src.dim();
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

    // Horizontal pass.
    let mut tmp = Array2::<A>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = A::zero();
            for (k, &t) in taps.iter().enumerate() {
                let sx = clamp(x as i64 + k as i64 - radius, w);
                acc = acc + t * src[(y, sx)];
            }
            tmp[(y, x)] = acc;
        }
    }
    // Vertical pass.
    let mut out = Array2::<A>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = A::zero();
            for (k, &t) in taps.iter().enumerate() {
                let sy = clamp(y as i64 + k as i64 - radius, h);
                acc = acc + t * tmp[(sy, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Source coordinate for an output pixel under the half-pixel-center
/// convention: `(o + 0.5) * in/out - 0.5`.
#[inline]
fn src_coord(o: usize, scale: f64) -> f64 {
    (o as f64 + 0.5) * scale - 0.5
}

/// Tap indices and weight for linear interpolation along one axis, with
/// clamping at the borders.
#[inline]
fn linear_taps(o: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let s = src_coord(o, scale);
    let s0 = s.floor();
    let frac = s - s0;
    let i0 = (s0 as i64).clamp(0, len as i64 - 1) as usize;
    let i1 = (s0 as i64 + 1).clamp(0, len as i64 - 1) as usize;
    (i0, i1, frac)
}

/// Bilinear resize to `(oh, ow)`.
pub fn bilinear_resize2d<A: Element>(src: &ArrayView2<'_, A>, oh: usize, ow: usize) -> Array2<A> {
    let (ih, iw) = src.dim();
    if (ih, iw) == (oh, ow) {
        return src.to_owned();
    }
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    let mut out = Array2::<A>::zeros((oh, ow));
    for y in 0..oh {
        let (y0, y1, fy) = linear_taps(y, sy, ih);
        let wy0 = A::lit(1.0 - fy);
        let wy1 = A::lit(fy);
        for x in 0..ow {
            let (x0, x1, fx) = linear_taps(x, sx, iw);
            let wx0 = A::lit(1.0 - fx);
            let wx1 = A::lit(fx);
            out[(y, x)] = wy0 * (wx0 * src[(y0, x0)] + wx1 * src[(y0, x1)])
                + wy1 * (wx0 * src[(y1, x0)] + wx1 * src[(y1, x1)]);
        }
    }
    out
}

/// Adjoint of [`bilinear_resize2d`]: scatters an `(oh, ow)` cotangent back
/// onto an `(ih, iw)` grid with the same interpolation weights.
pub fn bilinear_resize2d_adjoint<A: Element>(
    grad_out: &ArrayView2<'_, A>,
    ih: usize,
    iw: usize,
) -> Array2<A> {
    let (oh, ow) = grad_out.dim();
    if (ih, iw) == (oh, ow) {
        return grad_out.to_owned();
    }
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    let mut out = Array2::<A>::zeros((ih, iw));
    for y in 0..oh {
        let (y0, y1, fy) = linear_taps(y, sy, ih);
        let wy0 = A::lit(1.0 - fy);
        let wy1 = A::lit(fy);
        for x in 0..ow {
            let (x0, x1, fx) = linear_taps(x, sx, iw);
            let wx0 = A::lit(1.0 - fx);
            let wx1 = A::lit(fx);
            let g = grad_out[(y, x)];
            out[(y0, x0)] = out[(y0, x0)] + wy0 * wx0 * g;
            out[(y0, x1)] = out[(y0, x1)] + wy0 * wx1 * g;
            out[(y1, x0)] = out[(y1, x0)] + wy1 * wx0 * g;
            out[(y1, x1)] = out[(y1, x1)] + wy1 * wx1 * g;
        }
    }
    out
}

/// Nearest-neighbor resize under the same coordinate convention as
/// [`bilinear_resize2d`]; used for masks so labels stay binary.
pub fn nearest_resize2d<T: Copy>(src: &ArrayView2<'_, T>, oh: usize, ow: usize) -> Array2<T> {
    let (ih, iw) = src.dim();
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let iy = (src_coord(y, sy).round() as i64).clamp(0, ih as i64 - 1) as usize;
        let ix = (src_coord(x, sx).round() as i64).clamp(0, iw as i64 - 1) as usize;
        src[(iy, ix)]
    })
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        let eff_h = self.dilation * (self.kh - 1) + 1;
        let eff_w = self.dilation * (self.kw - 1) + 1;
        let oh = (h + 2 * self.padding - eff_h) / self.stride + 1;
        let ow = (w + 2 * self.padding - eff_w) / self.stride + 1;
        (oh, ow)
    }

    /// True when the padded input covers the dilated kernel at least once.
    pub fn fits(&self, h: usize, w: usize) -> bool {
        let eff_h = self.dilation * (self.kh - 1) + 1;
        let eff_w = self.dilation * (self.kw - 1) + 1;
        h + 2 * self.padding >= eff_h && w + 2 * self.padding >= eff_w
    }
}

/// Unfolds one sample `(C, H, W)` into a `(C*kh*kw, OH*OW)` matrix.
pub fn im2col<A: Element>(x: &ArrayView3<'_, A>, geom: &ConvGeom, col: &mut ArrayViewMut2<'_, A>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = geom.out_dim(h, w);
    debug_assert_eq!(col.dim(), (c * geom.kh * geom.kw, oh * ow));
    let pad = geom.padding as i64;
    for ch in 0..c {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (ch * geom.kh + ki) * geom.kw + kj;
                let dy = (ki * geom.dilation) as i64 - pad;
                let dx = (kj * geom.dilation) as i64 - pad;
                for oy in 0..oh {
                    let sy = oy as i64 * geom.stride as i64 + dy;
                    let base = oy * ow;
                    if sy < 0 || sy >= h as i64 {
                        for ox in 0..ow {
                            col[(row, base + ox)] = A::zero();
                        }
                        continue;
                    }
                    for ox in 0..ow {
                        let sx = ox as i64 * geom.stride as i64 + dx;
                        col[(row, base + ox)] = if sx < 0 || sx >= w as i64 {
                            A::zero()
                        } else {
                            x[(ch, sy as usize, sx as usize)]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds a `(C*kh*kw, OH*OW)` cotangent back onto the
/// `(C, H, W)` input grid, accumulating overlapping taps.
pub fn col2im<A: Element>(
    col: &ArrayView2<'_, A>,
    geom: &ConvGeom,
    out: &mut ArrayViewMut3<'_, A>,
) {
    let (c, h, w) = out.dim();
    let (oh, ow) = geom.out_dim(h, w);
    debug_assert_eq!(col.dim(), (c * geom.kh * geom.kw, oh * ow));
    let pad = geom.padding as i64;
    for ch in 0..c {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (ch * geom.kh + ki) * geom.kw + kj;
                let dy = (ki * geom.dilation) as i64 - pad;
                let dx = (kj * geom.dilation) as i64 - pad;
                for oy in 0..oh {
                    let sy = oy as i64 * geom.stride as i64 + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let base = oy * ow;
                    for ox in 0..ow {
                        let sx = ox as i64 * geom.stride as i64 + dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let idx = (ch, sy as usize, sx as usize);
                        out[idx] = out[idx] + col[(row, base + ox)];
                    }
                }
            }
        }
    }
}
