//! Augmentation pipeline and the photometric style transform that builds
//! whitening pairs.
//!
//! Geometric transforms (scale, crop, flip) apply identically to image and
//! mask (mask resampled nearest-neighbor); photometric transforms (jitter,
//! blur) touch the image only. Everything is a pure function of
//! (inputs, seed, policy).

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SrwError};
use crate::kernels::{bilinear_resize2d, gaussian_blur2d, nearest_resize2d};

/// Maximum relative deltas of the three photometric jitter factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorJitter {
    pub fn uniform(strength: f64) -> Self {
        ColorJitter { brightness: strength, contrast: strength, saturation: strength }
    }
}

/// Enabled transforms and their ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Probability of a horizontal flip.
    pub hflip_prob: f64,
    /// Random rescale factor range (applied first; shrink pads with zeros,
    /// grow crops back randomly).
    pub scale: Option<(f64, f64)>,
    /// Random crop: range of the kept side fraction, then resized back.
    pub crop: Option<(f64, f64)>,
    pub jitter: Option<ColorJitter>,
    /// Gaussian blur sigma range, applied with `blur_prob`.
    pub blur_sigma: Option<(f64, f64)>,
    pub blur_prob: f64,
}

impl AugmentPolicy {
    /// Leaves inputs untouched.
    pub fn identity() -> Self {
        AugmentPolicy {
            hflip_prob: 0.0,
            scale: None,
            crop: None,
            jitter: None,
            blur_sigma: None,
            blur_prob: 0.0,
        }
    }

    /// Default training policy: mild geometry and color noise.
    pub fn training_default() -> Self {
        AugmentPolicy {
            hflip_prob: 0.5,
            scale: Some((0.9, 1.15)),
            crop: Some((0.85, 1.0)),
            jitter: Some(ColorJitter::uniform(0.10)),
            blur_sigma: Some((0.1, 1.0)),
            blur_prob: 0.25,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.blur_prob) {
            return Err(SrwError::Validation("augment: probabilities must lie in [0, 1]".into()));
        }
        if let Some((lo, hi)) = self.scale {
            if !(lo > 0.0 && hi >= lo) {
                return Err(SrwError::Validation(format!(
                    "augment: bad scale range ({lo}, {hi})"
                )));
            }
        }
        if let Some((lo, hi)) = self.crop {
            if !(lo > 0.0 && hi >= lo) {
                return Err(SrwError::Validation(format!("augment: bad crop range ({lo}, {hi})")));
            }
            if hi > 1.0 {
                return Err(SrwError::Validation(
                    "augment: crop fraction above 1 asks for a crop larger than the image".into(),
                ));
            }
        }
        if let Some((lo, hi)) = self.blur_sigma {
            if !(lo >= 0.0 && hi >= lo) {
                return Err(SrwError::Validation(format!("augment: bad blur range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn resize_pair(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    oh: usize,
    ow: usize,
) -> (Array3<f32>, Array2<u8>) {
    let (c, _, _) = image.dim();
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ch in 0..c {
        out.index_axis_mut(Axis(0), ch)
            .assign(&bilinear_resize2d(&image.index_axis(Axis(0), ch), oh, ow));
    }
    let m = nearest_resize2d(&mask.view(), oh, ow);
    (out, m)
}

fn hflip_image(image: &Array3<f32>) -> Array3<f32> {
    let mut out = image.clone();
    out.invert_axis(Axis(2));
    out
}

fn hflip_mask(mask: &Array2<u8>) -> Array2<u8> {
    let mut out = mask.clone();
    out.invert_axis(Axis(1));
    out
}

pub(crate) fn apply_jitter(image: &mut Array3<f32>, jitter: &ColorJitter, rng: &mut ChaCha8Rng) {
    let fb = 1.0 + rng.random_range(-jitter.brightness..=jitter.brightness);
    let fc = 1.0 + rng.random_range(-jitter.contrast..=jitter.contrast);
    let fs = 1.0 + rng.random_range(-jitter.saturation..=jitter.saturation);
    let (c, h, w) = image.dim();
    debug_assert_eq!(c, 3);
    // brightness
    image.mapv_inplace(|v| (v as f64 * fb) as f32);
    // contrast around the global luminance mean
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / (3 * h * w) as f64;
    image.mapv_inplace(|v| (mean + (v as f64 - mean) * fc) as f32);
    // saturation toward the per-pixel gray value
    for y in 0..h {
        for x in 0..w {
            let gray =
                (image[(0, y, x)] + image[(1, y, x)] + image[(2, y, x)]) as f64 / 3.0;
            for ch in 0..3 {
                let v = image[(ch, y, x)] as f64;
                image[(ch, y, x)] = (gray + (v - gray) * fs) as f32;
            }
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn blur_image(image: &mut Array3<f32>, sigma: f64) {
    let c = image.dim().0;
    for ch in 0..c {
        let blurred = gaussian_blur2d(&image.index_axis(Axis(0), ch), sigma);
        image.index_axis_mut(Axis(0), ch).assign(&blurred);
    }
}

/// Applies the policy to an image/mask pair. Output keeps the input size.
pub fn augment(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    seed: u64,
    policy: &AugmentPolicy,
) -> Result<(Array3<f32>, Array2<u8>)> {
    policy.validate()?;
    let (c, h, w) = image.dim();
    if c != 3 || mask.dim() != (h, w) {
        return Err(SrwError::Validation(format!(
            "augment: image {:?} and mask {:?} are not an aligned RGB pair",
            image.dim(),
            mask.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();
    let mut msk = mask.clone();

    if let Some((lo, hi)) = policy.scale {
        let s = rng.random_range(lo..=hi);
        let nh = ((h as f64 * s).round() as usize).max(1);
        let nw = ((w as f64 * s).round() as usize).max(1);
        if (nh, nw) != (h, w) {
            let (ri, rm) = resize_pair(&img, &msk, nh, nw);
            if nh >= h && nw >= w {
                let oy = rng.random_range(0..=(nh - h));
                let ox = rng.random_range(0..=(nw - w));
                img = ri.slice(ndarray::s![.., oy..oy + h, ox..ox + w]).to_owned();
                msk = rm.slice(ndarray::s![oy..oy + h, ox..ox + w]).to_owned();
            } else {
                // shrink: paste at a random offset on a zero canvas (zero
                // image is background-colored after modality transforms of 0)
                let oy = rng.random_range(0..=(h - nh));
                let ox = rng.random_range(0..=(w - nw));
                let mut ci = Array3::<f32>::zeros((3, h, w));
                let mut cm = Array2::<u8>::zeros((h, w));
                ci.slice_mut(ndarray::s![.., oy..oy + nh, ox..ox + nw]).assign(&ri);
                cm.slice_mut(ndarray::s![oy..oy + nh, ox..ox + nw]).assign(&rm);
                img = ci;
                msk = cm;
            }
        }
    }

    if let Some((lo, hi)) = policy.crop {
        let f = rng.random_range(lo..=hi);
        let ch_ = ((h as f64 * f).round() as usize).clamp(1, h);
        let cw = ((w as f64 * f).round() as usize).clamp(1, w);
        if (ch_, cw) != (h, w) {
            let oy = rng.random_range(0..=(h - ch_));
            let ox = rng.random_range(0..=(w - cw));
            let ci = img.slice(ndarray::s![.., oy..oy + ch_, ox..ox + cw]).to_owned();
            let cm = msk.slice(ndarray::s![oy..oy + ch_, ox..ox + cw]).to_owned();
            let (ri, rm) = resize_pair(&ci, &cm, h, w);
            img = ri;
            msk = rm;
        }
    }

    if policy.hflip_prob > 0.0 && rng.random::<f64>() < policy.hflip_prob {
        img = hflip_image(&img);
        msk = hflip_mask(&msk);
    }

    if let Some(jitter) = &policy.jitter {
        apply_jitter(&mut img, jitter, &mut rng);
    }

    if let Some((lo, hi)) = policy.blur_sigma {
        if policy.blur_prob > 0.0 && rng.random::<f64>() < policy.blur_prob {
            let sigma = rng.random_range(lo..=hi);
            blur_image(&mut img, sigma);
        }
    }

    Ok((img, msk))
}

/// Photometric-only transform producing the whitening pair: color jitter plus
/// Gaussian blur, never geometry, so covariance pairs stay spatially aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTransform {
    pub jitter: ColorJitter,
    pub blur_sigma: (f64, f64),
}

impl Default for StyleTransform {
    fn default() -> Self {
        StyleTransform { jitter: ColorJitter::uniform(0.3), blur_sigma: (0.1, 1.5) }
    }
}

impl StyleTransform {
    pub fn apply(&self, image: &Array3<f32>, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = image.clone();
        apply_jitter(&mut img, &self.jitter, &mut rng);
        let sigma = rng.random_range(self.blur_sigma.0..=self.blur_sigma.1);
        if sigma > 1e-4 {
            blur_image(&mut img, sigma);
        }
        img
    }
}

/// [`StyleTransform::apply`] with the default strengths.
pub fn style_transform(image: &Array3<f32>, seed: u64) -> Array3<f32> {
    StyleTransform::default().apply(image, seed)
}
