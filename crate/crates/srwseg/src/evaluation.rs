//! Segmentation metrics, the source-vs-target evaluation protocol, and
//! report/overlay export.
//!
//! Metrics are macro-averaged: computed per image (lesion = positive class),
//! then reported as mean plus population standard deviation across the split.
//! Zero-denominator conventions: an empty ground truth with an empty
//! prediction scores 1 everywhere; an empty ground truth with a non-empty
//! prediction scores 0 for IoU, precision, and recall. These keep means free
//! of NaNs and make a swap of prediction and ground truth exchange precision
//! with recall.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Result, SrwError};
use crate::exec;
use crate::network::Model;
use crate::synthdata::SamplePair;

/// Pixel confusion counts of one image (class 1 = lesion = positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// Pixelwise confusion between two binary masks of equal shape.
pub fn confusion(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(SrwError::Validation(format!(
            "confusion: prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.iter().any(|&v| v > 1) || gt.iter().any(|&v| v > 1) {
        return Err(SrwError::Validation("confusion: masks must be binary".into()));
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// The four reported metrics of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean_accuracy: f64,
}

fn ratio(num: u64, den: u64, other_err: u64) -> f64 {
    if den > 0 {
        num as f64 / den as f64
    } else if other_err == 0 {
        1.0
    } else {
        0.0
    }
}

/// IoU, precision, recall, and mean accuracy (mean of per-class pixel
/// accuracies) from confusion counts, with the degenerate-case rules above.
pub fn metrics_from_counts(c: &ConfusionCounts) -> Metrics {
    let iou = if c.tp + c.fp + c.fn_ > 0 {
        c.tp as f64 / (c.tp + c.fp + c.fn_) as f64
    } else {
        1.0
    };
    let precision = ratio(c.tp, c.tp + c.fp, c.fn_);
    let recall = ratio(c.tp, c.tp + c.fn_, c.fp);
    let specificity = ratio(c.tn, c.tn + c.fp, c.fn_);
    Metrics { iou, precision, recall, mean_accuracy: 0.5 * (recall + specificity) }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub id: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean_accuracy: f64,
}

/// Split-level evaluation report; serializes to the JSON schema consumed by
/// downstream tooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub split: String,
    pub n: usize,
    pub metrics: BTreeMap<String, MeanStd>,
    pub per_image: Vec<PerImageMetrics>,
}

impl MetricsReport {
    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        self.metrics.get(name).copied()
    }

    pub fn mean_iou(&self) -> f64 {
        self.metric("iou").map(|m| m.mean).unwrap_or(f64::NAN)
    }
}

/// Builds the report from per-image predictions already in hand.
pub fn evaluate_masks(
    samples: &[SamplePair],
    predictions: &[Array2<u8>],
    model_id: &str,
    split: &str,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(SrwError::Validation("evaluate: empty dataset".into()));
    }
    if samples.len() != predictions.len() {
        return Err(SrwError::Validation(format!(
            "evaluate: {} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for (sample, pred) in samples.iter().zip(predictions) {
        let counts = confusion(pred, &sample.mask)
            .map_err(|e| SrwError::Validation(format!("{}: {e}", sample.id)))?;
        let m = metrics_from_counts(&counts);
        per_image.push(PerImageMetrics {
            id: sample.id.clone(),
            iou: m.iou,
            precision: m.precision,
            recall: m.recall,
            mean_accuracy: m.mean_accuracy,
        });
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("iou".into(), mean_std(&per_image.iter().map(|m| m.iou).collect::<Vec<_>>()));
    metrics.insert(
        "precision".into(),
        mean_std(&per_image.iter().map(|m| m.precision).collect::<Vec<_>>()),
    );
    metrics.insert(
        "recall".into(),
        mean_std(&per_image.iter().map(|m| m.recall).collect::<Vec<_>>()),
    );
    metrics.insert(
        "mean_accuracy".into(),
        mean_std(&per_image.iter().map(|m| m.mean_accuracy).collect::<Vec<_>>()),
    );
    Ok(MetricsReport {
        model: model_id.to_string(),
        split: split.to_string(),
        n: samples.len(),
        metrics,
        per_image,
    })
}

/// Predicts masks for a slice of samples, batching runs of equally sized
/// images.
pub fn predict_all<A: Element>(
    model: &Model<A>,
    samples: &[SamplePair],
    batch_size: usize,
) -> Result<Vec<Array2<u8>>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let dim = samples[start].image.dim();
        let mut end = start + 1;
        while end < samples.len() && end - start < batch_size && samples[end].image.dim() == dim {
            end += 1;
        }
        let (c, h, w) = dim;
        let mut batch = Array4::<A>::zeros((end - start, c, h, w));
        for (i, sample) in samples[start..end].iter().enumerate() {
            batch
                .index_axis_mut(Axis(0), i)
                .assign(&sample.image.mapv(|v| A::lit(v as f64)));
        }
        let masks = model.predict_mask(&batch)?;
        for i in 0..(end - start) {
            out.push(masks.index_axis(Axis(0), i).to_owned());
        }
        start = end;
    }
    Ok(out)
}

/// Runs the model over a split and assembles the report. Order is the input
/// order (the loader already sorts by id).
pub fn evaluate<A: Element>(
    model: &Model<A>,
    samples: &[SamplePair],
    model_id: &str,
    split: &str,
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(SrwError::Validation("evaluate: empty dataset".into()));
    }
    let predictions = predict_all(model, samples, batch_size)?;
    evaluate_masks(samples, &predictions, model_id, split)
}

/// Writes the report as pretty JSON (temp file + rename).
pub fn export_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let bytes =
        serde_json::to_vec_pretty(report).map_err(|e| SrwError::Data(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| SrwError::io_at(parent, e))?;
        }
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, &bytes).map_err(|e| SrwError::io_at(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SrwError::io_at(path, e))?;
    Ok(())
}

/// Reads a report back.
pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let bytes = fs::read(path).map_err(|e| SrwError::io_at(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| SrwError::Data(format!("{}: {e}", path.display())))
}

fn boundary(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] != 1 {
                continue;
            }
            let at_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let exposed = at_border
                || mask[(y - 1, x)] == 0
                || mask[(y + 1, x)] == 0
                || mask[(y, x - 1)] == 0
                || mask[(y, x + 1)] == 0;
            if exposed {
                edges.push((y, x));
            }
        }
    }
    edges
}

/// Writes up to `limit` overlay PNGs: the input frame with the ground-truth
/// boundary in red and the predicted boundary in green. Returns how many
/// files were written.
pub fn export_overlays<A: Element>(
    model: &Model<A>,
    samples: &[SamplePair],
    dir: &Path,
    limit: usize,
) -> Result<usize> {
    let n = limit.min(samples.len());
    if n == 0 {
        return Ok(0);
    }
    fs::create_dir_all(dir).map_err(|e| SrwError::io_at(dir, e))?;
    let subset = &samples[..n];
    let predictions = predict_all(model, subset, 8)?;
    let writes: Vec<Result<()>> = exec::map_indexed(n, |i| {
        let sample = &subset[i];
        let (_, h, w) = sample.image.dim();
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (sample.image[(0, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (sample.image[(1, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (sample.image[(2, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        for (y, x) in boundary(&sample.mask) {
            rgb.put_pixel(x as u32, y as u32, image::Rgb([220, 30, 30]));
        }
        for (y, x) in boundary(&predictions[i]) {
            rgb.put_pixel(x as u32, y as u32, image::Rgb([40, 220, 40]));
        }
        let path = dir.join(format!("{}.png", sample.id));
        rgb.save(&path).map_err(|e| SrwError::Data(format!("{}: {e}", path.display())))
    });
    for w in writes {
        w?;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::Modality;
    use ndarray::Array3 as NdArray3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&[u8]]) -> Array2<u8> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| rows[y][x])
    }

    #[test]
    fn confusion_basics() {
        let gt = mask_from(&[&[1, 1], &[0, 0]]);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 0, 0, 2));

        let inv = gt.mapv(|v| 1 - v);
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!((c.fp, c.fn_), (2, 2));
    }

    #[test]
    fn confusion_hand_count_and_metrics() {
        // gt has 4 lesion pixels; prediction covers 2 of them and nothing else
        let gt = mask_from(&[&[1, 1, 0], &[1, 1, 0], &[0, 0, 0]]);
        let pred = mask_from(&[&[1, 1, 0], &[0, 0, 0], &[0, 0, 0]]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fn_, c.fp), (2, 2, 0));
        let m = metrics_from_counts(&c);
        assert_eq_f(m.iou, 0.5);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 0.5);
    }

    fn assert_eq_f(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} != {b}");
    }

    #[test]
    fn confusion_rejects_bad_inputs() {
        let a = mask_from(&[&[1, 0]]);
        let b = mask_from(&[&[1], &[0]]);
        assert!(confusion(&a, &b).is_err());
        let c = mask_from(&[&[2, 0]]);
        assert!(confusion(&c, &a).is_err());
    }

    #[test]
    fn degenerate_conventions() {
        // empty gt, empty pred
        let empty = Array2::<u8>::zeros((4, 4));
        let m = metrics_from_counts(&confusion(&empty, &empty).unwrap());
        assert_eq!((m.iou, m.precision, m.recall, m.mean_accuracy), (1.0, 1.0, 1.0, 1.0));
        // empty gt, non-empty pred
        let mut pred = empty.clone();
        pred[(0, 0)] = 1;
        let m = metrics_from_counts(&confusion(&pred, &empty).unwrap());
        assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));
        // non-empty gt, empty pred
        let m = metrics_from_counts(&confusion(&empty, &pred).unwrap());
        assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn metric_bounds_and_iou_dominance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pred = Array2::<u8>::from_shape_fn((8, 8), |_| rng.random_range(0..2));
            let gt = Array2::<u8>::from_shape_fn((8, 8), |_| rng.random_range(0..2));
            let m = metrics_from_counts(&confusion(&pred, &gt).unwrap());
            for v in [m.iou, m.precision, m.recall, m.mean_accuracy] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(m.iou <= m.precision + 1e-12);
            assert!(m.iou <= m.recall + 1e-12);
        }
    }

    #[test]
    fn swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let pred = Array2::<u8>::from_shape_fn((6, 6), |_| rng.random_range(0..2));
            let gt = Array2::<u8>::from_shape_fn((6, 6), |_| rng.random_range(0..2));
            let m1 = metrics_from_counts(&confusion(&pred, &gt).unwrap());
            let m2 = metrics_from_counts(&confusion(&gt, &pred).unwrap());
            assert_eq_f(m1.iou, m2.iou);
            assert_eq_f(m1.precision, m2.recall);
            assert_eq_f(m1.recall, m2.precision);
        }
    }

    fn dummy_sample(id: &str, mask: Array2<u8>) -> SamplePair {
        let (h, w) = mask.dim();
        SamplePair {
            id: id.into(),
            image: NdArray3::from_elem((3, h, w), 0.5),
            image_aug: None,
            mask,
            modality: Modality::SourceLike,
        }
    }

    #[test]
    fn perfect_predictions_give_unit_means_zero_std() {
        let mask = mask_from(&[&[1, 0], &[0, 1]]);
        let samples = vec![dummy_sample("a", mask.clone())];
        let report = evaluate_masks(&samples, &[mask], "perfect", "val").unwrap();
        for (_, m) in &report.metrics {
            assert_eq!(m.mean, 1.0);
            assert_eq!(m.std, 0.0);
        }
    }

    #[test]
    fn duplicated_image_gives_zero_std() {
        let gt = mask_from(&[&[1, 1], &[0, 0]]);
        let pred = mask_from(&[&[1, 0], &[0, 0]]);
        let samples = vec![dummy_sample("a", gt.clone()), dummy_sample("b", gt.clone())];
        let report = evaluate_masks(&samples, &[pred.clone(), pred], "m", "val").unwrap();
        let iou = report.metric("iou").unwrap();
        assert!((iou.mean - 0.5).abs() < 1e-12);
        assert_eq!(iou.std, 0.0);
    }

    #[test]
    fn aggregates_match_per_image_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        let mut preds = Vec::new();
        for i in 0..9 {
            let gt = Array2::<u8>::from_shape_fn((8, 8), |_| rng.random_range(0..2));
            let pred = Array2::<u8>::from_shape_fn((8, 8), |_| rng.random_range(0..2));
            samples.push(dummy_sample(&format!("s{i}"), gt));
            preds.push(pred);
        }
        let report = evaluate_masks(&samples, &preds, "m", "val").unwrap();
        let recomputed = mean_std(&report.per_image.iter().map(|m| m.iou).collect::<Vec<_>>());
        let header = report.metric("iou").unwrap();
        assert_eq!(recomputed.mean, header.mean);
        assert_eq!(recomputed.std, header.std);
    }

    #[test]
    fn report_round_trip() {
        let mask = mask_from(&[&[1, 0], &[0, 1]]);
        let samples = vec![dummy_sample("a", mask.clone())];
        let report = evaluate_masks(&samples, &[mask], "m", "test-source").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        export_report(&report, &path).unwrap();
        let loaded = load_report(&path).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(evaluate_masks(&[], &[], "m", "val").is_err());
    }
}
