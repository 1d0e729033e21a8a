//! Command-line surface: corpus generation, training, evaluation, the
//! self-test table, and the SRW-placement ablation sweep.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage or configuration
//! error. All randomness funnels through `--seed`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, CONFIG_KEY_HELP};
use crate::error::{Result, SrwError};
use crate::evaluation;
use crate::network::load_checkpoint;
use crate::selftest::run_selftest;
use crate::synthdata::{build_corpus, load_dataset, Corpus, CorpusConfig, Split};
use crate::training::{train, TrainingConfig};

#[derive(Parser, Debug)]
#[command(
    name = "srwseg",
    version,
    about = "Domain-generalizable binary segmentation via style normalization + selective whitening, on a synthetic two-modality benchmark",
    after_help = CONFIG_KEY_HELP
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines (see the key list below).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Inline override, repeatable: --set epochs=30 --set srw_stages=1,2
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel sections (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Run every data-parallel section sequentially.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-modality corpus.
    Synthgen {
        /// Output directory for images, masks, and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a corpus.
    Train {
        /// Corpus directory (from synthgen or user data in the same layout).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and the epoch log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split and export the report.
    Eval {
        /// Checkpoint file (`best.srwseg` or `last.srwseg` of a run).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Split to score: train, val, test-source, or test-target.
        #[arg(long, default_value = "test-target")]
        split: String,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write boundary overlays (ground truth red, prediction green) here.
        #[arg(long)]
        overlays: Option<PathBuf>,
        /// Maximum number of overlay images.
        #[arg(long, default_value_t = 8)]
        overlay_limit: usize,
    },
    /// Run the gradient checks and property oracles; exit 0 only if all pass.
    Selftest,
    /// Train the SRW placement sweep ({}, {1}, {1,2}, {1,2,3}) with a shared
    /// seed and print the target-IoU comparison table.
    Ablate {
        /// Corpus directory; generated into the cache when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the four runs and the summary.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            err.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn setup_parallelism(common: &Common) {
    if common.sequential {
        crate::exec::set_parallel(false);
    }
    #[cfg(feature = "parallel")]
    if common.threads > 0 {
        // Ignore failures: the global pool may already exist in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global();
    }
}

fn execute(cli: Cli) -> Result<()> {
    setup_parallelism(&cli.common);
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synthgen { out, force } => synthgen(&cfg, out, force),
        Command::Train { data, out } => train_cmd(&cfg, &data, out),
        Command::Eval { checkpoint, data, split, report, overlays, overlay_limit } => {
            eval_cmd(&cfg, &checkpoint, &data, &split, report, overlays, overlay_limit)
        }
        Command::Selftest => selftest_cmd(cfg.training.seed),
        Command::Ablate { data, out } => ablate_cmd(&cfg, data, out),
    }
}

fn synthgen(cfg: &RunConfig, out: PathBuf, force: bool) -> Result<()> {
    let corpus_cfg = CorpusConfig {
        out_dir: out,
        seed: cfg.training.seed,
        n_source: cfg.corpus.n_source,
        n_target: cfg.corpus.n_target,
        size: cfg.corpus.size,
        force,
    };
    let manifest = build_corpus(&corpus_cfg)?;
    println!(
        "corpus written to {} (seed {}, {}x{} px): train {}, val {}, test-source {}, test-target {}",
        corpus_cfg.out_dir.display(),
        manifest.seed,
        manifest.size,
        manifest.size,
        manifest.counts["train"],
        manifest.counts["val"],
        manifest.counts["test-source"],
        manifest.counts["test-target"],
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: PathBuf) -> Result<()> {
    let corpus = load_dataset(data)?;
    let tcfg = TrainingConfig { out_dir: out, ..cfg.training.clone() };
    println!(
        "training srw_stages={:?} for {} epochs on {} images (seed {})",
        cfg.network.srw_stages,
        tcfg.epochs,
        corpus.split_len(Split::Train),
        tcfg.seed
    );
    let outcome = train::<f32>(&tcfg, &cfg.network, &corpus, |r| {
        println!(
            "epoch {:>3}  lr {:.5}  task {:.4}  dc {:.4}  isw {:.5}  val-iou {:.4}",
            r.epoch, r.lr, r.task_loss, r.dc_loss, r.isw_loss, r.val_iou
        );
    })?;
    println!(
        "done: {} parameters, best val IoU {:.4} at epoch {}; checkpoints: {} / {}",
        outcome.param_count,
        outcome.best_val_iou,
        outcome.best_epoch,
        outcome.best_checkpoint.display(),
        outcome.last_checkpoint.display()
    );
    Ok(())
}

fn eval_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    report_path: Option<PathBuf>,
    overlays: Option<PathBuf>,
    overlay_limit: usize,
) -> Result<()> {
    if !checkpoint.exists() {
        return Err(SrwError::Data(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let split = Split::parse(split)?;
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let corpus = load_dataset(data)?;
    let samples = corpus.load_split(split)?;
    let model_id = checkpoint.display().to_string();
    let report = evaluation::evaluate(
        &ck.model,
        &samples,
        &model_id,
        split.as_str(),
        cfg.training.batch_size,
    )?;
    println!("split {} ({} images):", split.as_str(), report.n);
    for name in ["iou", "precision", "recall", "mean_accuracy"] {
        let m = report.metric(name).expect("known metric");
        println!("  {name:<14} {:.4} ± {:.4}", m.mean, m.std);
    }
    if let Some(path) = report_path {
        evaluation::export_report(&report, &path)?;
        println!("report written to {}", path.display());
    }
    if let Some(dir) = overlays {
        let n = evaluation::export_overlays(&ck.model, &samples, &dir, overlay_limit)?;
        println!("{n} overlays written to {}", dir.display());
    }
    Ok(())
}

fn selftest_cmd(seed: u64) -> Result<()> {
    let report = run_selftest(seed);
    print!("{}", report.render_table());
    if report.all_passed() {
        Ok(())
    } else {
        Err(SrwError::Numeric("self-test reported failures".into()))
    }
}

/// Cache directory for corpora the ablation generates itself:
/// `$SRWSEG_CACHE` or `./srwseg-cache`.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("SRWSEG_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("srwseg-cache"))
}

fn ensure_corpus(cfg: &RunConfig, data: Option<PathBuf>) -> Result<Corpus> {
    if let Some(path) = data {
        return load_dataset(path);
    }
    let dir = cache_dir().join(format!(
        "corpus-seed{}-{}x{}-{}px",
        cfg.training.seed, cfg.corpus.n_source, cfg.corpus.n_target, cfg.corpus.size
    ));
    if !dir.join("manifest.json").exists() {
        println!("generating cached corpus at {}", dir.display());
        build_corpus(&CorpusConfig {
            out_dir: dir.clone(),
            seed: cfg.training.seed,
            n_source: cfg.corpus.n_source,
            n_target: cfg.corpus.n_target,
            size: cfg.corpus.size,
            force: true,
        })?;
    }
    load_dataset(dir)
}

fn ablate_cmd(cfg: &RunConfig, data: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let corpus = ensure_corpus(cfg, data)?;
    let variants: [&[usize]; 4] = [&[], &[1], &[1, 2], &[1, 2, 3]];
    let mut rows = Vec::new();
    for stages in variants {
        let label = if stages.is_empty() {
            "none".to_string()
        } else {
            stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut ncfg = cfg.network.clone();
        ncfg.srw_stages = stages.to_vec();
        let run_dir = out.join(format!("srw-{}", label.replace(',', "")));
        let tcfg = TrainingConfig { out_dir: run_dir, ..cfg.training.clone() };
        println!("[ablate] srw_stages = {{{label}}}");
        let outcome = train::<f32>(&tcfg, &ncfg, &corpus, |r| {
            println!(
                "  epoch {:>3}  task {:.4}  val-iou {:.4}",
                r.epoch, r.task_loss, r.val_iou
            );
        })?;
        let ck = load_checkpoint::<f32>(&outcome.best_checkpoint)?;
        let target = corpus.load_split(Split::TestTarget)?;
        let report = evaluation::evaluate(
            &ck.model,
            &target,
            &format!("srw-{label}"),
            Split::TestTarget.as_str(),
            cfg.training.batch_size,
        )?;
        let source = corpus.load_split(Split::TestSource)?;
        let source_report = evaluation::evaluate(
            &ck.model,
            &source,
            &format!("srw-{label}"),
            Split::TestSource.as_str(),
            cfg.training.batch_size,
        )?;
        rows.push((label, source_report.mean_iou(), report.mean_iou()));
    }
    println!("\nsrw_stages      source-IoU   target-IoU");
    println!("{}", "-".repeat(42));
    for (label, src, tgt) in &rows {
        println!("{{{label:<12}}} {src:>10.4} {tgt:>12.4}");
    }
    let summary: Vec<serde_json::Value> = rows
        .iter()
        .map(|(label, src, tgt)| {
            serde_json::json!({"srw_stages": label, "source_iou": src, "target_iou": tgt})
        })
        .collect();
    let path = out.join("ablation.json");
    std::fs::create_dir_all(&out).map_err(|e| SrwError::io_at(&out, e))?;
    std::fs::write(&path, serde_json::to_vec_pretty(&summary).expect("serializable"))
        .map_err(|e| SrwError::io_at(&path, e))?;
    println!("summary written to {}", path.display());
    Ok(())
}
