use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use mfish_core::hosvd::cross_image_matrix;
use mfish_core::ingest::{curate, dataset_crop, preprocess, CropWindow, DatasetManifest, MfishSample};
use mfish_core::metrics::ErrorMatrix;
use mfish_core::segnet::save_checkpoint;
use mfish_core::synth::{generate_dataset, label_histogram, write_dataset};
use mfish_core::train::{
    evaluate_model, run_loocv, train_model, EpochContext, LoocvSummary, TrainError, SUMMARY_FILE, TRAINING_LOG_FILE,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RUN_CONFIG_FILE};
use crate::render::{heatmap, save_png};
use crate::{read_json, write_json, CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "mfishseg", version, about = "mFISH chromosome segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomised stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Half-width of the per-image, per-channel exposure offset.
        #[arg(long)]
        exposure: Option<f64>,
    },
    /// Curate, crop and downscale a dataset into a cache with a summary.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network on every curated sample.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Stop early once the training-set CCR reaches this value.
        #[arg(long)]
        stop_at_ccr: Option<f64>,
    },
    /// Leave-one-out cross-validation.
    Loocv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Reuse folds whose results already exist in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// HOSVD train-image × test-image CCR matrix.
    HosvdMatrix {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlays, confusion heatmap and CCR tables for a finished run.
    Report {
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// What [`run`] produced, for callers that want the numbers.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Synth(DatasetManifest),
    Ingest(IngestSummary),
    Train(TrainSummary),
    Loocv(LoocvSummary),
    HosvdMatrix(ErrorMatrix),
    Report(crate::report::ReportSummary),
}

/// Resolves the configuration (file, then flags) and runs the command.
pub fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    let set_train = |cfg: &mut RunConfig, epochs: Option<usize>, batch: Option<usize>| {
        if let Some(e) = epochs {
            cfg.train.epochs = e;
            cfg.train.eval_last_k = cfg.train.eval_last_k.min(e);
        }
        if let Some(b) = batch {
            cfg.train.batch_size = b;
        }
    };
    match cli.command {
        Command::Synth {
            out,
            images,
            size,
            exposure,
        } => {
            cfg.command = "synth".into();
            cfg.out_dir = out;
            if let Some(n) = images {
                cfg.synth.num_images = n;
            }
            if let Some(s) = size {
                (cfg.synth.height, cfg.synth.width) = (s, s);
            }
            if let Some(e) = exposure {
                cfg.synth.exposure_offset = e;
            }
            cmd_synth(&mut cfg).map(Outcome::Synth)
        }
        Command::Ingest { manifest, out } => {
            cfg.command = "ingest".into();
            (cfg.manifest, cfg.out_dir) = (Some(manifest), out);
            cmd_ingest(&mut cfg).map(Outcome::Ingest)
        }
        Command::Train {
            manifest,
            out,
            epochs,
            batch_size,
            stop_at_ccr,
        } => {
            cfg.command = "train".into();
            (cfg.manifest, cfg.out_dir) = (Some(manifest), out);
            set_train(&mut cfg, epochs, batch_size);
            if stop_at_ccr.is_some() {
                cfg.stop_at_train_ccr = stop_at_ccr;
            }
            cmd_train(&mut cfg).map(Outcome::Train)
        }
        Command::Loocv {
            manifest,
            out,
            epochs,
            batch_size,
            resume,
        } => {
            cfg.command = "loocv".into();
            (cfg.manifest, cfg.out_dir) = (Some(manifest), out);
            set_train(&mut cfg, epochs, batch_size);
            cmd_loocv(&mut cfg, resume).map(Outcome::Loocv)
        }
        Command::HosvdMatrix { manifest, out } => {
            cfg.command = "hosvd-matrix".into();
            (cfg.manifest, cfg.out_dir) = (Some(manifest), out);
            cmd_hosvd_matrix(&mut cfg).map(Outcome::HosvdMatrix)
        }
        Command::Report { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.join("report"));
            crate::report::cmd_report(&run_dir, &out, cfg.workers).map(Outcome::Report)
        }
    }
}

/// Runs `f` on a pool capped at `workers` threads.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    Ok(builder.build()?.install(f))
}

/// Curated samples of the configured manifest (its path made absolute).
pub fn load_samples(cfg: &mut RunConfig) -> Result<Vec<MfishSample>> {
    let path = cfg.require_manifest()?;
    cfg.manifest = Some(path.clone());
    let manifest = DatasetManifest::load(&path)?;
    let samples = curate(&manifest, &cfg.coding)?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples.into());
    }
    Ok(samples)
}

pub fn cmd_synth(cfg: &mut RunConfig) -> Result<DatasetManifest> {
    let samples = generate_dataset(&cfg.synth, &cfg.coding)?;
    let manifest = write_dataset(&samples, &cfg.out_dir)?;
    cfg.save(&cfg.out_dir)?;
    info!("wrote {} synthetic samples to {}", samples.len(), cfg.out_dir.display());
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub sample_count: usize,
    pub ids: Vec<String>,
    pub crop: CropWindow,
    pub scale: f64,
    pub height: usize,
    pub width: usize,
    /// Pixel count per label name over the whole dataset.
    pub class_pixels: BTreeMap<String, usize>,
    pub per_sample: BTreeMap<String, BTreeMap<String, usize>>,
}

pub const INGEST_SUMMARY_FILE: &str = "dataset_summary.json";

/// Writes the preprocessed samples (16-bit PNG planes + labels) with a
/// `manifest.json` that the other commands accept directly.
pub fn cmd_ingest(cfg: &mut RunConfig) -> Result<IngestSummary> {
    let samples = load_samples(cfg)?;
    let (h, w) = samples[0].dims();
    let crop = dataset_crop(&samples, &cfg.coding, cfg.ingest.crop_width, cfg.ingest.crop_height)?;
    if (crop.width, crop.height) != (cfg.ingest.crop_width, cfg.ingest.crop_height) {
        info!("crop shrunk to {}×{} to fit the {w}×{h} frames", crop.width, crop.height);
    }
    let scale = cfg.ingest.scale;
    let processed: Vec<MfishSample> = with_workers(cfg.workers, || {
        samples.par_iter().map(|s| preprocess(s, crop, scale)).collect::<Result<_, _>>()
    })??;
    write_dataset(&processed, &cfg.out_dir)?;

    let mut class_pixels = BTreeMap::new();
    let mut per_sample = BTreeMap::new();
    for s in &processed {
        let named: BTreeMap<String, usize> = label_histogram(s)
            .into_iter()
            .map(|(code, n)| (cfg.coding.name(code), n))
            .collect();
        for (name, n) in &named {
            *class_pixels.entry(name.clone()).or_insert(0) += n;
        }
        per_sample.insert(s.id.clone(), named);
    }
    let (oh, ow) = processed[0].dims();
    let summary = IngestSummary {
        sample_count: processed.len(),
        ids: processed.iter().map(|s| s.id.clone()).collect(),
        crop,
        scale,
        height: oh,
        width: ow,
        class_pixels,
        per_sample,
    };
    write_json(&cfg.out_dir.join(INGEST_SUMMARY_FILE), &summary)?;
    cfg.save(&cfg.out_dir)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    /// Pooled training-set CCR of the final network.
    pub train_ccr: f64,
    pub per_sample_ccr: Vec<(String, f64)>,
    /// (epoch, training-set CCR) when early stopping was monitored.
    pub monitored_ccr: Vec<(usize, f64)>,
    pub checkpoint: PathBuf,
}

pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const MODEL_FILE: &str = "model.ckpt";

pub fn cmd_train(cfg: &mut RunConfig) -> Result<TrainSummary> {
    let samples = load_samples(cfg)?;
    cfg.save(&cfg.out_dir)?;
    let coding = cfg.coding.clone();
    let target = cfg.stop_at_train_ccr;
    let mut monitored = Vec::new();
    let mut observer = |ctx: &EpochContext<'_>| -> Result<ControlFlow<()>, TrainError> {
        let Some(target) = target else {
            return Ok(ControlFlow::Continue(()));
        };
        let ccr = evaluate_model(ctx.network, &samples, &coding)?.pooled.ccr;
        info!("epoch {}: training CCR {ccr:.4}", ctx.epoch);
        monitored.push((ctx.epoch, ccr));
        Ok(if ccr >= target {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        })
    };
    let train_cfg = cfg.train.clone();
    let (net, opt, log) = with_workers(cfg.workers, || train_model(&samples, &coding, &train_cfg, Some(&mut observer)))??;
    let checkpoint = cfg.out_dir.join(MODEL_FILE);
    let meta = serde_json::json!({ "epochs_run": log.records.len(), "seed": train_cfg.seed });
    save_checkpoint(&checkpoint, &net, Some(&opt), meta)?;
    log.write_csv("all", &cfg.out_dir.join(TRAINING_LOG_FILE))?;
    let eval = evaluate_model(&net, &samples, &coding)?;
    let summary = TrainSummary {
        epochs_run: log.records.len(),
        final_loss: log.final_loss(),
        train_ccr: eval.pooled.ccr,
        per_sample_ccr: eval.per_sample,
        monitored_ccr: monitored,
        checkpoint,
    };
    write_json(&cfg.out_dir.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub const LOOCV_TABLE_FILE: &str = "loocv_summary.csv";

/// With `resume`, the saved configuration must match the requested one so
/// that reused folds stay comparable.
pub fn cmd_loocv(cfg: &mut RunConfig, resume: bool) -> Result<LoocvSummary> {
    let samples = load_samples(cfg)?;
    let saved = cfg.out_dir.join(RUN_CONFIG_FILE);
    if resume && saved.is_file() {
        let previous: RunConfig = read_json(&saved)?;
        if previous.train != cfg.train || previous.manifest != cfg.manifest {
            return Err(CliError::Config(format!(
                "{} was produced with a different configuration; drop --resume or use a new --out",
                cfg.out_dir.display()
            )));
        }
    }
    cfg.save(&cfg.out_dir)?;
    let summary = with_workers(cfg.workers, || {
        run_loocv(&samples, &cfg.coding, &cfg.train, Some(&cfg.out_dir), resume)
    })??;
    write_loocv_table(&summary, &cfg.out_dir.join(LOOCV_TABLE_FILE))?;
    info!("LOOCV mean CCR {:.4} over {} folds", summary.mean_ccr, summary.folds.len());
    Ok(summary)
}

fn write_loocv_table(summary: &LoocvSummary, path: &Path) -> Result<()> {
    let err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["test_id", "final_ccr", "epochs_averaged"]).map_err(err)?;
    for f in &summary.folds {
        w.write_record([f.test_id.clone(), f.final_ccr.to_string(), f.per_epoch_ccr.len().to_string()])
            .map_err(err)?;
    }
    w.write_record(["mean".to_string(), summary.mean_ccr.to_string(), String::new()])
        .map_err(err)?;
    w.flush().map_err(|e| err(e.into()))
}

/// Reads a LOOCV run's summary JSON.
pub fn read_loocv_summary(run_dir: &Path) -> Result<LoocvSummary> {
    read_json(&run_dir.join(SUMMARY_FILE))
}

pub const MATRIX_FILE: &str = "error_matrix.csv";
pub const MATRIX_PNG: &str = "error_matrix.png";
pub const HOSVD_SUMMARY_FILE: &str = "hosvd_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixStats {
    pub samples: usize,
    pub diagonal_mean: f64,
    pub off_diagonal_mean: f64,
    pub best_off_diagonal_mean: f64,
    pub diagonal_max_rate: f64,
}

impl MatrixStats {
    pub fn of(m: &ErrorMatrix) -> Self {
        Self {
            samples: m.len(),
            diagonal_mean: m.diagonal_mean(),
            off_diagonal_mean: m.off_diagonal_mean(),
            best_off_diagonal_mean: m.best_off_diagonal_mean(),
            diagonal_max_rate: m.diagonal_max_rate(),
        }
    }
}

pub fn matrix_heatmap(m: &ErrorMatrix) -> image::RgbaImage {
    heatmap(m.values.view(), &m.ids, &m.ids, 0.0, 1.0)
}

pub fn cmd_hosvd_matrix(cfg: &mut RunConfig) -> Result<ErrorMatrix> {
    let samples = load_samples(cfg)?;
    cfg.save(&cfg.out_dir)?;
    let params = cfg.hosvd;
    let matrix = with_workers(cfg.workers, || cross_image_matrix(&samples, &cfg.coding, &params))??;
    matrix.write_csv(&cfg.out_dir.join(MATRIX_FILE))?;
    save_png(&matrix_heatmap(&matrix), &cfg.out_dir.join(MATRIX_PNG))?;
    let stats = MatrixStats::of(&matrix);
    info!(
        "diagonal mean {:.4}, off-diagonal mean {:.4}",
        stats.diagonal_mean, stats.off_diagonal_mean
    );
    write_json(&cfg.out_dir.join(HOSVD_SUMMARY_FILE), &stats)?;
    Ok(matrix)
}
