//! Synthetic two-modality segmentation corpus and the on-disk layout shared
//! with user-supplied data.
//!
//! Layout: `<root>/images/<id>.png` (RGB), `<root>/masks/<id>.png`
//! (grayscale, values 0 or 255), `<root>/manifest.json`. The train, val, and
//! test-source splits hold source-like frames; test-target holds target-like
//! frames and never appears at train time.

mod augment;
mod scene;

pub use augment::{augment, style_transform, AugmentPolicy, ColorJitter, StyleTransform};
pub use scene::{
    apply_modality, channel_means, generate_scene, modality_separability, Modality,
    LESION_AREA_MAX, LESION_AREA_MIN, SOURCE_MATRIX, TARGET_MATRIX,
};

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrwError};
use crate::exec;

pub const GENERATOR_VERSION: u32 = 1;

/// Corpus split names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    TestSource,
    TestTarget,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestSource, Split::TestTarget];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestSource => "test-source",
            Split::TestTarget => "test-target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test-source" => Ok(Split::TestSource),
            "test-target" => Ok(Split::TestTarget),
            other => Err(SrwError::Validation(format!("unknown split `{other}`"))),
        }
    }

    /// Modality every frame of this split carries.
    pub fn modality(&self) -> Modality {
        match self {
            Split::TestTarget => Modality::TargetLike,
            _ => Modality::SourceLike,
        }
    }
}

/// One image/mask pair in memory.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    /// `(3, H, W)` in [0, 1].
    pub image: Array3<f32>,
    /// Style-transformed twin, filled in by the training loop per epoch.
    pub image_aug: Option<Array3<f32>>,
    /// `(H, W)` in {0, 1}.
    pub mask: Array2<u8>,
    pub modality: Modality,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    #[serde(rename = "test-source")]
    pub test_source: Vec<String>,
    #[serde(rename = "test-target")]
    pub test_target: Vec<String>,
}

impl SplitIds {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestSource => &self.test_source,
            Split::TestTarget => &self.test_target,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub size: usize,
    pub counts: std::collections::BTreeMap<String, usize>,
    pub splits: SplitIds,
    pub generator_version: u32,
}

impl CorpusManifest {
    /// Splits must be pairwise disjoint and counts must match the id lists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for id in self.splits.ids(split) {
                if !seen.insert(id.clone()) {
                    return Err(SrwError::Data(format!(
                        "manifest: id `{id}` appears in more than one split"
                    )));
                }
            }
            let expected = self.counts.get(split.as_str()).copied().unwrap_or(0);
            let actual = self.splits.ids(split).len();
            if expected != actual {
                return Err(SrwError::Data(format!(
                    "manifest: split {} lists {actual} ids but counts say {expected}",
                    split.as_str()
                )));
            }
        }
        if seen.is_empty() {
            return Err(SrwError::Data("manifest: corpus is empty".into()));
        }
        Ok(())
    }
}

/// Parameters of [`build_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub size: usize,
    pub force: bool,
}

impl CorpusConfig {
    pub fn new(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        CorpusConfig {
            out_dir: out_dir.into(),
            seed,
            n_source: 600,
            n_target: 100,
            size: 64,
            force: false,
        }
    }
}

fn image_to_png_bytes(image: &Array3<f32>) -> Vec<u8> {
    let (_, h, w) = image.dim();
    let mut raw = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw.push((image[(c, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("png encode");
    bytes
}

fn mask_to_png_bytes(mask: &Array2<u8>) -> Vec<u8> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img: image::GrayImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("png encode");
    bytes
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| SrwError::io_at(path, e))?;
    f.write_all(bytes).map_err(|e| SrwError::io_at(path, e))
}

/// Generates the corpus on disk and returns its manifest. Regeneration with
/// the same config is byte-identical, manifest included.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<CorpusManifest> {
    if cfg.n_source < 10 {
        return Err(SrwError::Config("build_corpus: need at least 10 source scenes".into()));
    }
    if cfg.n_target == 0 {
        return Err(SrwError::Config("build_corpus: need at least 1 target scene".into()));
    }
    if cfg.out_dir.exists() {
        let non_empty = fs::read_dir(&cfg.out_dir)
            .map_err(|e| SrwError::io_at(&cfg.out_dir, e))?
            .next()
            .is_some();
        if non_empty && !cfg.force {
            return Err(SrwError::Data(format!(
                "output directory {} exists and is not empty; pass --force to overwrite",
                cfg.out_dir.display()
            )));
        }
        if non_empty {
            for sub in ["images", "masks"] {
                let dir = cfg.out_dir.join(sub);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| SrwError::io_at(&dir, e))?;
                }
            }
        }
    }
    let images_dir = cfg.out_dir.join("images");
    let masks_dir = cfg.out_dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| SrwError::io_at(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| SrwError::io_at(&masks_dir, e))?;

    // Per-scene seeds drawn up front in a fixed order.
    let mut seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene_seeds: Vec<u64> =
        (0..cfg.n_source + cfg.n_target).map(|_| rand::Rng::random(&mut seed_rng)).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_5345_4731_u64);

    let total = cfg.n_source + cfg.n_target;
    let size = cfg.size;
    let n_source = cfg.n_source;
    let seeds = &scene_seeds;
    let rendered: Vec<Result<(String, Vec<u8>, Vec<u8>)>> = exec::map_indexed(total, |i| {
        let (id, modality) = if i < n_source {
            (format!("src_{i:04}"), Modality::SourceLike)
        } else {
            (format!("tgt_{:04}", i - n_source), Modality::TargetLike)
        };
        let (image, mask) = generate_scene(seeds[i], size)?;
        let framed = apply_modality(&image, modality)?;
        Ok((id, image_to_png_bytes(&framed), mask_to_png_bytes(&mask)))
    });
    let mut source_ids = Vec::with_capacity(cfg.n_source);
    let mut target_ids = Vec::with_capacity(cfg.n_target);
    for item in rendered {
        let (id, img_bytes, mask_bytes) = item?;
        write_file(&images_dir.join(format!("{id}.png")), &img_bytes)?;
        write_file(&masks_dir.join(format!("{id}.png")), &mask_bytes)?;
        if id.starts_with("src_") {
            source_ids.push(id);
        } else {
            target_ids.push(id);
        }
    }

    // 80/10/10 split of the source scenes.
    let mut shuffled = source_ids.clone();
    shuffled.shuffle(&mut shuffle_rng);
    let n_train = cfg.n_source * 8 / 10;
    let n_val = cfg.n_source / 10;
    let mut train: Vec<String> = shuffled[..n_train].to_vec();
    let mut val: Vec<String> = shuffled[n_train..n_train + n_val].to_vec();
    let mut test_source: Vec<String> = shuffled[n_train + n_val..].to_vec();
    train.sort();
    val.sort();
    test_source.sort();
    target_ids.sort();

    let mut counts = std::collections::BTreeMap::new();
    counts.insert("train".to_string(), train.len());
    counts.insert("val".to_string(), val.len());
    counts.insert("test-source".to_string(), test_source.len());
    counts.insert("test-target".to_string(), target_ids.len());
    let manifest = CorpusManifest {
        seed: cfg.seed,
        size: cfg.size,
        counts,
        splits: SplitIds { train, val, test_source, test_target: target_ids },
        generator_version: GENERATOR_VERSION,
    };
    manifest.validate()?;

    let manifest_bytes =
        serde_json::to_vec_pretty(&manifest).map_err(|e| SrwError::Data(e.to_string()))?;
    let manifest_path = cfg.out_dir.join("manifest.json");
    let tmp = manifest_path.with_extension("tmp");
    write_file(&tmp, &manifest_bytes)?;
    fs::rename(&tmp, &manifest_path).map_err(|e| SrwError::io_at(&manifest_path, e))?;
    Ok(manifest)
}

/// An on-disk corpus in the layout above.
#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    pub manifest: CorpusManifest,
}

/// Opens and validates a corpus directory.
pub fn load_dataset(path: impl Into<PathBuf>) -> Result<Corpus> {
    let root = path.into();
    let manifest_path = root.join("manifest.json");
    if !manifest_path.exists() {
        return Err(SrwError::Data(format!(
            "{}: no manifest.json (empty or non-corpus directory)",
            root.display()
        )));
    }
    let bytes = fs::read(&manifest_path).map_err(|e| SrwError::io_at(&manifest_path, e))?;
    let manifest: CorpusManifest = serde_json::from_slice(&bytes)
        .map_err(|e| SrwError::Data(format!("{}: {e}", manifest_path.display())))?;
    manifest.validate()?;
    Ok(Corpus { root, manifest })
}

impl Corpus {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.manifest.splits.ids(split).len()
    }

    /// Loads every pair of a split, ordered by id. Load problems are
    /// itemized per sample id.
    pub fn load_split(&self, split: Split) -> Result<Vec<SamplePair>> {
        let mut ids: Vec<String> = self.manifest.splits.ids(split).to_vec();
        ids.sort();
        let modality = split.modality();
        let loaded: Vec<std::result::Result<SamplePair, String>> =
            exec::map_indexed(ids.len(), |i| {
                let id = &ids[i];
                self.load_pair(id, modality).map_err(|e| format!("{id}: {e}"))
            });
        let mut pairs = Vec::with_capacity(ids.len());
        let mut problems = Vec::new();
        for item in loaded {
            match item {
                Ok(p) => pairs.push(p),
                Err(msg) => problems.push(msg),
            }
        }
        if !problems.is_empty() {
            let shown = problems.iter().take(10).cloned().collect::<Vec<_>>().join("; ");
            let more = if problems.len() > 10 {
                format!(" (+{} more)", problems.len() - 10)
            } else {
                String::new()
            };
            return Err(SrwError::Data(format!(
                "{} load errors in split {}: {shown}{more}",
                problems.len(),
                split.as_str()
            )));
        }
        if pairs.is_empty() {
            return Err(SrwError::Data(format!("split {} is empty", split.as_str())));
        }
        Ok(pairs)
    }

    fn load_pair(&self, id: &str, modality: Modality) -> Result<SamplePair> {
        let img_path = self.root.join("images").join(format!("{id}.png"));
        let mask_path = self.root.join("masks").join(format!("{id}.png"));
        if !mask_path.exists() {
            return Err(SrwError::Data("missing mask file".into()));
        }
        let img = image::open(&img_path)
            .map_err(|e| SrwError::Data(format!("image: {e}")))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mask_img = image::open(&mask_path)
            .map_err(|e| SrwError::Data(format!("mask: {e}")))?
            .to_luma8();
        if mask_img.dimensions() != (w, h) {
            return Err(SrwError::Data(format!(
                "image is {w}x{h} but mask is {}x{}",
                mask_img.dimensions().0,
                mask_img.dimensions().1
            )));
        }
        let mut image_arr = Array3::<f32>::zeros((3, h as usize, w as usize));
        for (x, y, pixel) in img.enumerate_pixels() {
            for c in 0..3 {
                image_arr[(c, y as usize, x as usize)] = pixel.0[c] as f32 / 255.0;
            }
        }
        let mut mask_arr = Array2::<u8>::zeros((h as usize, w as usize));
        for (x, y, pixel) in mask_img.enumerate_pixels() {
            mask_arr[(y as usize, x as usize)] = match pixel.0[0] {
                0 => 0,
                255 => 1,
                other => {
                    return Err(SrwError::Data(format!(
                        "mask contains non-binary value {other}"
                    )))
                }
            };
        }
        Ok(SamplePair { id: id.to_string(), image: image_arr, image_aug: None, mask: mask_arr, modality })
    }
}
