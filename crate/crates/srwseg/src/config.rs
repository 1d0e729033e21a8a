//! Flat key-value run configuration: defaults, config file parsing, and
//! `key=value` overrides.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment.
//! Keys match the configuration struct fields exactly; unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use std::path::Path;

use crate::error::{Result, SrwError};
use crate::network::NetworkConfig;
use crate::snr::AttentionMode;
use crate::training::TrainingConfig;

/// Corpus generation parameters owned by the config surface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusParams {
    pub n_source: usize,
    pub n_target: usize,
    pub size: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams { n_source: 600, n_target: 100, size: 64 }
    }
}

/// Everything a run needs, before CLI flags are applied.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub corpus: CorpusParams,
}

/// One help line per documented key; `--help` prints this.
pub const CONFIG_KEY_HELP: &str = "\
network keys:
  stage_channels    four comma-separated channel counts      (default 32,64,128,256)
  srw_stages        comma-separated stages in 1..=4, or none (default 1,2,3)
  aspp_dilations    comma-separated dilations, 1 = 1x1 branch (default 1,6,12)
  num_classes       segmentation classes, must be 2          (default 2)
  input_size        HxW or single side, divisible by 16      (default 64x64)
  snr_reduction     attention bottleneck reduction           (default 16)
  norm_eps          instance-norm epsilon                    (default 1e-5)
  attention         per_sample | batch_shared                (default per_sample)
  center_before_cov zero-center features before covariance   (default true)
training keys:
  lr0               starting learning rate                   (default 0.01)
  momentum          SGD momentum                             (default 0.9)
  poly_power        polynomial LR schedule power             (default 0.9)
  epochs            training epochs                          (default 50)
  batch_size        images per step                          (default 8)
  lambda_isw        whitening loss weight                    (default 0.6)
  lambda_dc         dual-causality loss weight               (default 1.0)
  warmup_epochs     epochs before the whitening loss starts  (default 5)
  seed              run seed (the --seed flag wins)          (default 0)
  weight_decay      L2 penalty folded into gradients         (default 0)
  checkpoint_every  epochs between rolling checkpoints       (default 1)
  dc_on_aug         dual-causality loss on both paths        (default false)
  ema_momentum      pair-variance EMA momentum               (default 0.99)
corpus keys:
  n_source          source-modality scenes (80/10/10 split)  (default 600)
  n_target          target-modality scenes (test only)       (default 100)
  size              frame side in pixels, even, >= 32        (default 64)";

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| SrwError::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(SrwError::Config(format!("key `{key}`: expected bool, got `{other}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let trimmed = value.trim();
    if trimmed.is_empty() || trimmed == "none" {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| parse_num::<usize>(key, part))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            // network
            "stage_channels" => {
                let list = parse_list(key, value)?;
                if list.len() != 4 {
                    return Err(SrwError::Config(format!(
                        "key `stage_channels`: need exactly 4 values, got {}",
                        list.len()
                    )));
                }
                self.network.stage_channels = [list[0], list[1], list[2], list[3]];
            }
            "srw_stages" => {
                let mut list = parse_list(key, value)?;
                list.sort_unstable();
                list.dedup();
                self.network.srw_stages = list;
            }
            "aspp_dilations" => self.network.aspp_dilations = parse_list(key, value)?,
            "num_classes" => self.network.num_classes = parse_num(key, value)?,
            "input_size" => {
                let v = value.trim();
                let (h, w) = match v.split_once(['x', 'X']) {
                    Some((a, b)) => (parse_num(key, a)?, parse_num(key, b)?),
                    None => {
                        let side: usize = parse_num(key, v)?;
                        (side, side)
                    }
                };
                self.network.input_size = (h, w);
            }
            "snr_reduction" => self.network.snr_reduction = parse_num(key, value)?,
            "norm_eps" => self.network.norm_eps = parse_num(key, value)?,
            "attention" => {
                self.network.attention = match value.trim() {
                    "per_sample" => AttentionMode::PerSample,
                    "batch_shared" => AttentionMode::BatchShared,
                    other => {
                        return Err(SrwError::Config(format!(
                            "key `attention`: expected per_sample or batch_shared, got `{other}`"
                        )))
                    }
                }
            }
            "center_before_cov" => self.network.center_before_cov = parse_bool(key, value)?,
            // training
            "lr0" => self.training.lr0 = parse_num(key, value)?,
            "momentum" => self.training.momentum = parse_num(key, value)?,
            "poly_power" => self.training.poly_power = parse_num(key, value)?,
            "epochs" => self.training.epochs = parse_num(key, value)?,
            "batch_size" => self.training.batch_size = parse_num(key, value)?,
            "lambda_isw" => self.training.lambda_isw = parse_num(key, value)?,
            "lambda_dc" => self.training.lambda_dc = parse_num(key, value)?,
            "warmup_epochs" => self.training.warmup_epochs = parse_num(key, value)?,
            "seed" => self.training.seed = parse_num(key, value)?,
            "weight_decay" => self.training.weight_decay = parse_num(key, value)?,
            "checkpoint_every" => self.training.checkpoint_every = parse_num(key, value)?,
            "dc_on_aug" => self.training.dc_on_aug = parse_bool(key, value)?,
            "ema_momentum" => self.training.ema_momentum = parse_num(key, value)?,
            // corpus
            "n_source" => self.corpus.n_source = parse_num(key, value)?,
            "n_target" => self.corpus.n_target = parse_num(key, value)?,
            "size" => self.corpus.size = parse_num(key, value)?,
            other => {
                return Err(SrwError::Config(format!(
                    "unknown config key `{other}` (see --help for the key list)"
                )))
            }
        }
        Ok(())
    }

    /// Parses a config file of `key = value` lines.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| SrwError::io_at(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(SrwError::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply_kv(key, value).map_err(|e| {
                SrwError::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` override strings (CLI `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(SrwError::Config(format!(
                    "override `{item}` is not of the form KEY=VALUE"
                )));
            };
            self.apply_kv(key, value)?;
        }
        Ok(())
    }

    /// Final consistency check across the merged configuration.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        if self.corpus.size < 32 || self.corpus.size % 2 != 0 {
            return Err(SrwError::Config("corpus size must be even and at least 32".into()));
        }
        Ok(())
    }
}
