//! Training loop, evaluation and the leave-one-out harness.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{augment, augmentation_rng, AugmentationConfig, BatchIterator, IngestError, LabelCoding, MfishSample};
use crate::metrics::{average_last_k, compute_ccr, confusion, CcrReport, ConfusionMatrix, MetricsError};
use crate::nn::{adam_step, softmax_cross_entropy, AdamConfig, AdamState, NnError};
use crate::segnet::{build_network, save_checkpoint, Network, NetworkConfig, SegnetError};

/// Networks are trained in single precision.
pub type Net = Network<f32>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training samples")]
    NoSamples,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("leave-one-out needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite ({loss}) at epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("fold {id}: {source}")]
    Fold {
        id: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Segnet(#[from] SegnetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Which checkpoints a LOOCV fold writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    None,
    /// Only the network after the final epoch.
    Last,
    /// Every epoch of the evaluation window plus the lowest-loss epoch.
    #[default]
    EvalWindowAndBest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_last_k: usize,
    pub optimizer: AdamConfig,
    pub augmentation: AugmentationConfig,
    pub network: NetworkConfig,
    pub checkpoints: CheckpointPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            eval_last_k: 5,
            optimizer: AdamConfig::default(),
            augmentation: AugmentationConfig::default(),
            network: NetworkConfig::default(),
            checkpoints: CheckpointPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be positive".into()));
        }
        if self.eval_last_k > self.epochs {
            return Err(TrainError::InvalidConfig(format!(
                "eval_last_k ({}) exceeds epochs ({})",
                self.eval_last_k, self.epochs
            )));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
        }
        self.augmentation.validate()?;
        self.network.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-pixel loss over the epoch, weighted by masked pixel count.
    pub mean_loss: f64,
    pub test_ccr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }

    /// Appends rows `(fold, epoch, mean_loss, test_ccr)` to `writer`.
    pub fn write_rows<W: std::io::Write>(&self, fold: &str, writer: &mut csv::Writer<W>) -> csv::Result<()> {
        for r in &self.records {
            writer.write_record([
                fold.to_string(),
                r.epoch.to_string(),
                format!("{}", r.mean_loss),
                r.test_ccr.map(|c| format!("{c}")).unwrap_or_default(),
            ])?;
        }
        Ok(())
    }

    pub fn write_csv(&self, fold: &str, path: &Path) -> Result<(), TrainError> {
        let err = |source| TrainError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(LOG_HEADER).map_err(err)?;
        self.write_rows(fold, &mut w).map_err(err)?;
        w.flush().map_err(|e| err(e.into()))
    }
}

pub const LOG_HEADER: [&str; 4] = ["fold", "epoch", "mean_loss", "test_ccr"];

/// What the per-epoch observer sees.
pub struct EpochContext<'a> {
    pub epoch: usize,
    pub epochs: usize,
    pub mean_loss: f64,
    pub network: &'a Net,
    pub optimizer: &'a AdamState<f32>,
}

/// Per-epoch callback. Returning `Break` stops training after this epoch.
pub type Observer<'o> = dyn FnMut(&EpochContext<'_>) -> Result<ControlFlow<()>, TrainError> + 'o;

/// Trains a freshly initialised network end to end on `samples`.
pub fn train_model(
    samples: &[MfishSample],
    coding: &LabelCoding,
    config: &TrainConfig,
    observer: Option<&mut Observer<'_>>,
) -> Result<(Net, AdamState<f32>, TrainLog), TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net: Net = build_network(&config.network, &mut init_rng)?;
    let mut opt = AdamState::new(config.optimizer);
    let mut log = TrainLog::default();
    // Shuffling and dropout draw from one stream; augmentation has its own
    // per-(sample, epoch) streams so it does not depend on processing order.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let aug_seed = config.augmentation.seed ^ config.seed;
    let mut observer = observer;

    for epoch in 1..=config.epochs {
        let augmented: Vec<MfishSample> = samples
            .par_iter()
            .map(|s| {
                let mut r = augmentation_rng(aug_seed, &s.id, epoch as u64);
                augment(s, &config.augmentation, coding, &mut r)
            })
            .collect();
        let mut loss_sum = 0.0;
        let mut pixels = 0usize;
        for batch in BatchIterator::<f32>::new(&augmented, coding, config.batch_size, &mut rng)? {
            let (logits, trace) = net.forward_train(&batch.inputs, &mut rng)?;
            let out = match softmax_cross_entropy(&logits, &batch.targets, &batch.mask) {
                Ok(out) => out,
                Err(NnError::EmptyMask) => {
                    warn!("epoch {epoch}: batch {:?} has no chromosome pixels, skipped", batch.ids);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let loss = out.loss as f64;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            net.zero_grad();
            net.backward(trace, &out.grad_logits)?;
            adam_step(&mut net.params_mut(), &mut opt)?;
            loss_sum += loss * out.pixels as f64;
            pixels += out.pixels;
        }
        let mean_loss = if pixels > 0 { loss_sum / pixels as f64 } else { f64::NAN };
        log.records.push(EpochRecord {
            epoch,
            mean_loss,
            test_ccr: None,
        });
        info!("epoch {epoch}/{}: loss {mean_loss:.5}", config.epochs);
        if let Some(obs) = observer.as_deref_mut() {
            let ctx = EpochContext {
                epoch,
                epochs: config.epochs,
                mean_loss,
                network: &net,
                optimizer: &opt,
            };
            if obs(&ctx)?.is_break() {
                break;
            }
        }
    }
    Ok((net, opt, log))
}

/// Pooled (micro-averaged) CCR plus per-sample values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pooled: CcrReport,
    pub per_sample: Vec<(String, f64)>,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    /// Mean of the per-sample CCRs (macro average over images).
    pub fn mean_per_sample(&self) -> f64 {
        self.per_sample.iter().map(|(_, c)| c).sum::<f64>() / self.per_sample.len() as f64
    }
}

/// Runs inference on every sample; samples without chromosome pixels are
/// skipped with a warning.
pub fn evaluate_model(net: &Net, samples: &[MfishSample], coding: &LabelCoding) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let mut reports = Vec::new();
    let mut per_sample = Vec::new();
    let mut matrix = ConfusionMatrix::zeros(coding.num_classes());
    for s in samples {
        let pred = net.predict_labels(s, coding)?;
        match compute_ccr(&pred, &s.labels, coding) {
            Ok(r) => {
                per_sample.push((s.id.clone(), r.ccr));
                reports.push(r);
                matrix.add(&confusion(&pred, &s.labels, coding)?);
            }
            Err(MetricsError::NoChromosomePixels) => warn!("{}: no chromosome pixels, excluded from evaluation", s.id),
            Err(e) => return Err(e.into()),
        }
    }
    if reports.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    Ok(Evaluation {
        pooled: CcrReport::merge(&reports)?,
        per_sample,
        confusion: matrix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub test_id: String,
    pub train_ids: Vec<String>,
    /// (epoch, CCR on the held-out sample) for the evaluation window.
    pub per_epoch_ccr: Vec<(usize, f64)>,
    pub final_ccr: f64,
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvSummary {
    pub folds: Vec<FoldResult>,
    /// Mean of the folds' final CCRs.
    pub mean_ccr: f64,
}

impl LoocvSummary {
    fn from_folds(folds: Vec<FoldResult>) -> Self {
        let mean_ccr = folds.iter().map(|f| f.final_ccr).sum::<f64>() / folds.len() as f64;
        Self { folds, mean_ccr }
    }
}

pub const FOLD_RESULT_FILE: &str = "fold_result.json";
pub const FOLD_LOG_FILE: &str = "log.csv";
pub const SUMMARY_FILE: &str = "loocv_summary.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";

pub fn fold_dir(root: &Path, index: usize, id: &str) -> PathBuf {
    root.join(format!("fold_{:03}_{id}", index + 1))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| TrainError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| TrainError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Trains on every sample but `test`, evaluating `test` during the last
/// `eval_last_k` epochs.
pub fn run_fold(
    samples: &[MfishSample],
    test: usize,
    coding: &LabelCoding,
    config: &TrainConfig,
    dir: Option<&Path>,
) -> Result<(FoldResult, TrainLog), TrainError> {
    let test_sample = &samples[test];
    let train: Vec<MfishSample> = samples
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != test)
        .map(|(_, s)| s.clone())
        .collect();
    let train_ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    assert!(
        !train_ids.contains(&test_sample.id),
        "held-out sample {} leaked into its training set",
        test_sample.id
    );
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|source| TrainError::Io {
            path: d.to_path_buf(),
            source,
        })?;
    }

    let window_start = config.epochs - config.eval_last_k + 1;
    let mut per_epoch = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut checkpoint_path = None;
    let mut observer = |ctx: &EpochContext<'_>| -> Result<ControlFlow<()>, TrainError> {
        let ckpt = |name: String| -> Result<Option<PathBuf>, TrainError> {
            let Some(d) = dir else { return Ok(None) };
            let path = d.join(name);
            let meta = serde_json::json!({ "epoch": ctx.epoch, "mean_loss": ctx.mean_loss, "test_id": test_sample.id });
            save_checkpoint(&path, ctx.network, Some(ctx.optimizer), meta)?;
            Ok(Some(path))
        };
        if ctx.epoch >= window_start {
            let pred = ctx.network.predict_labels(test_sample, coding)?;
            let ccr = compute_ccr(&pred, &test_sample.labels, coding)?.ccr;
            info!("{}: epoch {} held-out CCR {ccr:.4}", test_sample.id, ctx.epoch);
            per_epoch.push((ctx.epoch, ccr));
            if config.checkpoints == CheckpointPolicy::EvalWindowAndBest {
                checkpoint_path = ckpt(format!("epoch_{:03}.ckpt", ctx.epoch))?;
            }
        }
        match config.checkpoints {
            CheckpointPolicy::EvalWindowAndBest if ctx.mean_loss < best_loss => {
                best_loss = ctx.mean_loss;
                ckpt("best.ckpt".to_string())?;
            }
            CheckpointPolicy::Last if ctx.epoch == ctx.epochs => {
                checkpoint_path = ckpt("last.ckpt".to_string())?;
            }
            _ => {}
        }
        Ok(ControlFlow::Continue(()))
    };
    let (_, _, mut log) = train_model(&train, coding, config, Some(&mut observer))?;
    for (epoch, ccr) in &per_epoch {
        log.records[epoch - 1].test_ccr = Some(*ccr);
    }
    let values: Vec<f64> = per_epoch.iter().map(|p| p.1).collect();
    let final_ccr = average_last_k(&values, config.eval_last_k)?;
    let result = FoldResult {
        test_id: test_sample.id.clone(),
        train_ids,
        per_epoch_ccr: per_epoch,
        final_ccr,
        checkpoint_path,
    };
    if let Some(d) = dir {
        log.write_csv(&test_sample.id, &d.join(FOLD_LOG_FILE))?;
        // Written last: its presence marks the fold complete for `resume`.
        write_json(&d.join(FOLD_RESULT_FILE), &result)?;
    }
    Ok((result, log))
}

/// Leave-one-out cross-validation. With `out_dir`, every fold writes its own
/// directory (log, checkpoints, result) and, with `resume`, folds whose
/// result file already exists are loaded instead of retrained. The combined
/// log and summary are written at the end.
pub fn run_loocv(
    samples: &[MfishSample],
    coding: &LabelCoding,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<LoocvSummary, TrainError> {
    config.validate()?;
    if config.eval_last_k == 0 {
        return Err(TrainError::InvalidConfig("leave-one-out needs eval_last_k ≥ 1".into()));
    }
    if samples.len() < 2 {
        return Err(TrainError::TooFewSamples(samples.len()));
    }
    let folds: Vec<(FoldResult, TrainLog)> = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let id = &samples[i].id;
            let dir = out_dir.map(|root| fold_dir(root, i, id));
            let wrap = |source| TrainError::Fold {
                id: id.clone(),
                source: Box::new(source),
            };
            if let (true, Some(d)) = (resume, &dir) {
                let done = d.join(FOLD_RESULT_FILE);
                if done.is_file() {
                    info!("{id}: resuming from {}", done.display());
                    let result: FoldResult = read_json(&done).map_err(wrap)?;
                    let log = read_fold_log(&d.join(FOLD_LOG_FILE)).map_err(wrap)?;
                    return Ok((result, log));
                }
            }
            let mut fold_config = config.clone();
            fold_config.seed = config.seed.wrapping_add(i as u64);
            run_fold(samples, i, coding, &fold_config, dir.as_deref()).map_err(wrap)
        })
        .collect::<Result<_, _>>()?;

    if let Some(root) = out_dir {
        let path = root.join(TRAINING_LOG_FILE);
        let err = |source| TrainError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(LOG_HEADER).map_err(err)?;
        for (result, log) in &folds {
            log.write_rows(&result.test_id, &mut w).map_err(err)?;
        }
        w.flush().map_err(|e| err(e.into()))?;
    }
    let summary = LoocvSummary::from_folds(folds.into_iter().map(|(r, _)| r).collect());
    if let Some(root) = out_dir {
        write_json(&root.join(SUMMARY_FILE), &summary)?;
    }
    Ok(summary)
}

/// Reads a per-fold log written by [`TrainLog::write_csv`].
pub fn read_fold_log(path: &Path) -> Result<TrainLog, TrainError> {
    let err = |source| TrainError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut log = TrainLog::default();
    for row in r.deserialize::<(String, usize, f64, Option<f64>)>() {
        let (_, epoch, mean_loss, test_ccr) = row.map_err(err)?;
        log.records.push(EpochRecord {
            epoch,
            mean_loss,
            test_ccr,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::BlockSpec;
    use crate::synth::{generate_dataset, SynthConfig};

    pub(crate) fn tiny_net() -> NetworkConfig {
        let mut cfg = NetworkConfig::with_widths(4, 6, 6);
        cfg.aspp_branches = vec![
            BlockSpec::AsppBranch { kernel: 1, dilation: 1, filters: 6 },
            BlockSpec::AsppBranch { kernel: 3, dilation: 2, filters: 6 },
            BlockSpec::AsppPooling { filters: 4 },
        ];
        cfg
    }

    fn tiny_data(n: usize) -> Vec<MfishSample> {
        let cfg = SynthConfig {
            num_images: n,
            height: 32,
            width: 48,
            ..SynthConfig::default()
        };
        generate_dataset(&cfg, &LabelCoding::default()).unwrap()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            eval_last_k: 2.min(epochs),
            augmentation: AugmentationConfig::identity(),
            network: tiny_net(),
            checkpoints: CheckpointPolicy::None,
            optimizer: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            seed: 3,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let data = tiny_data(1);
        let cfg = TrainConfig {
            eval_last_k: 0,
            ..tiny_config(0)
        };
        let (net, opt, log) = train_model(&data, &LabelCoding::default(), &cfg, None).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(opt.step, 0);
        let fresh: Net = build_network(&cfg.network, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(net, fresh);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let coding = LabelCoding::default();
        assert!(matches!(train_model(&[], &coding, &tiny_config(1), None), Err(TrainError::NoSamples)));
        let net: Net = build_network(&tiny_net(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(evaluate_model(&net, &[], &coding), Err(TrainError::EmptyTestSet)));
        let data = tiny_data(1);
        assert!(matches!(
            run_loocv(&data, &coding, &tiny_config(2), None, false),
            Err(TrainError::TooFewSamples(1))
        ));
        let bad = TrainConfig {
            eval_last_k: 5,
            ..tiny_config(2)
        };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn loss_decreases_and_runs_are_reproducible() {
        let data = tiny_data(2);
        let coding = LabelCoding::default();
        let cfg = tiny_config(6);
        let (_, _, a) = train_model(&data, &coding, &cfg, None).unwrap();
        let (_, _, b) = train_model(&data, &coding, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert!(a.final_loss().unwrap() < a.records[0].mean_loss);
    }

    #[test]
    fn observer_can_stop_training() {
        let data = tiny_data(1);
        let mut seen = Vec::new();
        let mut obs = |ctx: &EpochContext<'_>| -> Result<ControlFlow<()>, TrainError> {
            seen.push(ctx.epoch);
            Ok(if ctx.epoch == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
        };
        let (_, _, log) = train_model(&data, &LabelCoding::default(), &tiny_config(5), Some(&mut obs)).unwrap();
        assert_eq!(seen, [1, 2]);
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn loocv_folds_are_disjoint_and_resumable() {
        let data = tiny_data(3);
        let coding = LabelCoding::default();
        let cfg = TrainConfig {
            checkpoints: CheckpointPolicy::Last,
            ..tiny_config(3)
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = run_loocv(&data, &coding, &cfg, Some(dir.path()), false).unwrap();
        assert_eq!(summary.folds.len(), 3);
        for (fold, sample) in summary.folds.iter().zip(&data) {
            assert_eq!(fold.test_id, sample.id);
            assert!(!fold.train_ids.contains(&sample.id));
            assert_eq!(fold.train_ids.len(), 2);
            assert_eq!(fold.per_epoch_ccr.len(), 2);
            assert_eq!(fold.per_epoch_ccr.iter().map(|p| p.0).collect::<Vec<_>>(), [2, 3]);
            let mean = (fold.per_epoch_ccr[0].1 + fold.per_epoch_ccr[1].1) / 2.0;
            assert!((fold.final_ccr - mean).abs() < 1e-15);
            assert!(fold.checkpoint_path.as_ref().unwrap().is_file());
        }
        let log = std::fs::read_to_string(dir.path().join(TRAINING_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 1 + 3 * 3);
        assert!(log.starts_with("fold,epoch,mean_loss,test_ccr"));

        // Tamper with one stored result: resume must pick it up verbatim.
        let path = fold_dir(dir.path(), 1, &data[1].id).join(FOLD_RESULT_FILE);
        let mut stored: FoldResult = read_json(&path).unwrap();
        stored.final_ccr = 0.123;
        write_json(&path, &stored).unwrap();
        let resumed = run_loocv(&data, &coding, &cfg, Some(dir.path()), true).unwrap();
        assert_eq!(resumed.folds[1].final_ccr, 0.123);
        assert_eq!(resumed.folds[0], summary.folds[0]);
    }
}
