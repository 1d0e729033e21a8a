//! Synthetic scene generator and the two fixed imaging modalities.
//!
//! A scene is a smoothed-noise background with one connected lesion blob that
//! carries its own higher-frequency texture and an intensity offset. The two
//! modalities are frozen color transforms: a warm matrix with gamma 0.9
//! (source-like) and a cool matrix with gamma 1.1 plus a local-contrast boost
//! on the green channel (target-like). All constants are fixed in code so
//! runs reproduce across machines.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SrwError};
use crate::kernels::gaussian_blur2d;

/// Imaging modality of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Modality {
    #[serde(rename = "source-like")]
    SourceLike,
    #[serde(rename = "target-like")]
    TargetLike,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::SourceLike => "source-like",
            Modality::TargetLike => "target-like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source-like" => Ok(Modality::SourceLike),
            "target-like" => Ok(Modality::TargetLike),
            other => Err(SrwError::Validation(format!("unknown modality tag `{other}`"))),
        }
    }
}

/// Warm color matrix of the source-like modality (rows produce R, G, B).
pub const SOURCE_MATRIX: [[f32; 3]; 3] =
    [[1.00, 0.08, 0.02], [0.06, 0.90, 0.04], [0.02, 0.05, 0.75]];
/// Cool color matrix of the target-like modality.
pub const TARGET_MATRIX: [[f32; 3]; 3] =
    [[0.45, 0.10, 0.05], [0.12, 0.95, 0.20], [0.10, 0.25, 1.00]];
const SOURCE_GAMMA: f32 = 0.9;
const TARGET_GAMMA: f32 = 1.1;
/// Local-contrast gain applied to the green channel of target-like frames.
const TARGET_GREEN_CONTRAST: f32 = 1.15;
/// Sigma of the local mean used by the contrast boost, in pixels.
const TARGET_CONTRAST_SIGMA: f64 = 2.0;

// Scene composition constants (fractions of the frame side unless noted).
const BG_SIGMA_FRAC: f64 = 0.10;
const LESION_SIGMA_FRAC: f64 = 0.16;
const TEXTURE_SIGMA_FRAC: f64 = 0.02;
/// Lesion field threshold quantile.
const LESION_QUANTILE: f64 = 0.85;
/// Accepted lesion area as a fraction of the frame.
pub const LESION_AREA_MIN: f64 = 0.02;
pub const LESION_AREA_MAX: f64 = 0.30;
const LESION_OFFSET: f32 = 0.12;
const LESION_TEXTURE_AMP: f32 = 0.35;
const MAX_RESAMPLES: usize = 20;

/// Smoothed noise field normalized to [0, 1].
fn field(rng: &mut ChaCha8Rng, size: usize, sigma: f64) -> Array2<f32> {
    let noise = Array2::<f32>::from_shape_fn((size, size), |_| rng.random::<f32>());
    let mut out = gaussian_blur2d(&noise.view(), sigma);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in out.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        out.fill(0.5);
    } else {
        out.mapv_inplace(|v| (v - lo) / (hi - lo));
    }
    out
}

/// Largest 4-connected component of a boolean grid, or `None` if empty.
fn largest_component(above: &Array2<bool>) -> Option<Array2<u8>> {
    let (h, w) = above.dim();
    let mut visited = Array2::<bool>::from_elem((h, w), false);
    let mut best: Option<(usize, Vec<(usize, usize)>)> = None;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !above[(sy, sx)] || visited[(sy, sx)] {
                continue;
            }
            let mut members = Vec::new();
            stack.push((sy, sx));
            visited[(sy, sx)] = true;
            while let Some((y, x)) = stack.pop() {
                members.push((y, x));
                if y > 0 && above[(y - 1, x)] && !visited[(y - 1, x)] {
                    visited[(y - 1, x)] = true;
                    stack.push((y - 1, x));
                }
                if y + 1 < h && above[(y + 1, x)] && !visited[(y + 1, x)] {
                    visited[(y + 1, x)] = true;
                    stack.push((y + 1, x));
                }
                if x > 0 && above[(y, x - 1)] && !visited[(y, x - 1)] {
                    visited[(y, x - 1)] = true;
                    stack.push((y, x - 1));
                }
                if x + 1 < w && above[(y, x + 1)] && !visited[(y, x + 1)] {
                    visited[(y, x + 1)] = true;
                    stack.push((y, x + 1));
                }
            }
            if best.as_ref().map_or(true, |(n, _)| members.len() > *n) {
                best = Some((members.len(), members));
            }
        }
    }
    best.map(|(_, members)| {
        let mut mask = Array2::<u8>::zeros((h, w));
        for (y, x) in members {
            mask[(y, x)] = 1;
        }
        mask
    })
}

/// Deterministic scene: pre-modality image in [0, 1] (3, size, size) plus the
/// binary lesion mask. Fails if no attempt out of 20 yields a lesion blob
/// within the area bounds; callers should reseed.
pub fn generate_scene(seed: u64, size: usize) -> Result<(Array3<f32>, Array2<u8>)> {
    if size < 32 || size % 2 != 0 {
        return Err(SrwError::Validation(format!(
            "scene size must be even and at least 32, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = size as f64;
    let base = field(&mut rng, size, side * BG_SIGMA_FRAC);
    let chan: Vec<Array2<f32>> =
        (0..3).map(|_| field(&mut rng, size, side * BG_SIGMA_FRAC)).collect();
    let texture = field(&mut rng, size, side * TEXTURE_SIGMA_FRAC);

    let mut mask = None;
    for _ in 0..MAX_RESAMPLES {
        let lesion_field = field(&mut rng, size, side * LESION_SIGMA_FRAC);
        let mut sorted: Vec<f32> = lesion_field.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite field"));
        let idx = ((LESION_QUANTILE * (sorted.len() - 1) as f64).floor() as usize)
            .min(sorted.len() - 1);
        let threshold = sorted[idx];
        let above = lesion_field.mapv(|v| v > threshold);
        if let Some(blob) = largest_component(&above) {
            let area = blob.iter().filter(|&&v| v == 1).count() as f64 / (size * size) as f64;
            if (LESION_AREA_MIN..=LESION_AREA_MAX).contains(&area) {
                mask = Some(blob);
                break;
            }
        }
    }
    let mask = mask.ok_or_else(|| {
        SrwError::Generation(format!(
            "seed {seed}: no lesion blob within area bounds after {MAX_RESAMPLES} resamples; reseed"
        ))
    })?;

    let mut image = Array3::<f32>::zeros((3, size, size));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let bg = 0.25 + 0.5 * (0.7 * base[(y, x)] + 0.3 * chan[c][(y, x)]);
                let v = if mask[(y, x)] == 1 {
                    bg + LESION_OFFSET + LESION_TEXTURE_AMP * (texture[(y, x)] - 0.5)
                } else {
                    bg
                };
                image[(c, y, x)] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((image, mask))
}

/// Renders a pre-modality image in one of the two fixed modalities. Geometry
/// is untouched; masks stay valid.
pub fn apply_modality(image: &Array3<f32>, modality: Modality) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(SrwError::Validation(format!("apply_modality: need 3 channels, got {c}")));
    }
    if image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(SrwError::Validation("apply_modality: image values must lie in [0, 1]".into()));
    }
    let (matrix, gamma) = match modality {
        Modality::SourceLike => (&SOURCE_MATRIX, SOURCE_GAMMA),
        Modality::TargetLike => (&TARGET_MATRIX, TARGET_GAMMA),
    };
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for row in 0..3 {
                let mixed = matrix[row][0] * image[(0, y, x)]
                    + matrix[row][1] * image[(1, y, x)]
                    + matrix[row][2] * image[(2, y, x)];
                out[(row, y, x)] = mixed.clamp(0.0, 1.0).powf(gamma);
            }
        }
    }
    if modality == Modality::TargetLike {
        let green = out.index_axis(ndarray::Axis(0), 1).to_owned();
        let local = gaussian_blur2d(&green.view(), TARGET_CONTRAST_SIGMA);
        let mut g = out.index_axis_mut(ndarray::Axis(0), 1);
        ndarray::Zip::from(&mut g).and(&local).for_each(|v, &m| {
            *v = (m + TARGET_GREEN_CONTRAST * (*v - m)).clamp(0.0, 1.0);
        });
    }
    Ok(out)
}

/// Per-channel means of a frame; the feature of the separability oracle.
pub fn channel_means(image: &Array3<f32>) -> [f64; 3] {
    let mut means = [0.0f64; 3];
    let (_, h, w) = image.dim();
    for c in 0..3 {
        means[c] = image.index_axis(ndarray::Axis(0), c).iter().map(|&v| v as f64).sum::<f64>()
            / (h * w) as f64;
    }
    means
}

/// Fits a closed-form linear discriminant on per-frame channel means and
/// reports its accuracy separating the two modalities over `n_seeds` scenes
/// (each rendered in both modalities). A high score certifies the corpus
/// really carries a modality shift.
pub fn modality_separability(n_seeds: usize, size: usize, base_seed: u64) -> Result<f64> {
    if n_seeds == 0 {
        return Err(SrwError::Validation("modality_separability: need at least one seed".into()));
    }
    let feats: Vec<([f64; 3], [f64; 3])> = crate::exec::map_indexed(n_seeds, |i| {
        let seed = base_seed.wrapping_add(i as u64);
        let (image, _) = generate_scene(seed, size).expect("scene generation");
        let src = apply_modality(&image, Modality::SourceLike).expect("valid image");
        let tgt = apply_modality(&image, Modality::TargetLike).expect("valid image");
        (channel_means(&src), channel_means(&tgt))
    });

    let n = feats.len() as f64;
    let mut mean_src = [0.0f64; 3];
    let mut mean_tgt = [0.0f64; 3];
    for (s, t) in &feats {
        for k in 0..3 {
            mean_src[k] += s[k] / n;
            mean_tgt[k] += t[k] / n;
        }
    }
    // pooled covariance with a small ridge
    let mut cov = [[0.0f64; 3]; 3];
    for (s, t) in &feats {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (s[i] - mean_src[i]) * (s[j] - mean_src[j]) / (2.0 * n);
                cov[i][j] += (t[i] - mean_tgt[i]) * (t[j] - mean_tgt[j]) / (2.0 * n);
            }
        }
    }
    for (i, row) in cov.iter_mut().enumerate() {
        row[i] += 1e-8;
    }
    let inv = invert3(&cov)
        .ok_or_else(|| SrwError::Numeric("singular pooled covariance in separability".into()))?;
    let diff = [
        mean_tgt[0] - mean_src[0],
        mean_tgt[1] - mean_src[1],
        mean_tgt[2] - mean_src[2],
    ];
    let mut weights = [0.0f64; 3];
    for i in 0..3 {
        for j in 0..3 {
            weights[i] += inv[i][j] * diff[j];
        }
    }
    let mid = [
        (mean_src[0] + mean_tgt[0]) / 2.0,
        (mean_src[1] + mean_tgt[1]) / 2.0,
        (mean_src[2] + mean_tgt[2]) / 2.0,
    ];
    let bias: f64 = (0..3).map(|k| weights[k] * mid[k]).sum();
    let score = |f: &[f64; 3]| -> f64 { (0..3).map(|k| weights[k] * f[k]).sum::<f64>() - bias };
    let mut correct = 0usize;
    for (s, t) in &feats {
        if score(s) <= 0.0 {
            correct += 1;
        }
        if score(t) > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / (2.0 * n))
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut out = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let a = m[(i + 1) % 3][(j + 1) % 3] * m[(i + 2) % 3][(j + 2) % 3]
                - m[(i + 1) % 3][(j + 2) % 3] * m[(i + 2) % 3][(j + 1) % 3];
            out[j][i] = a * inv_det;
        }
    }
    Some(out)
}
