//! `report`: turns a finished run directory into PNGs, CSV tables and a
//! markdown summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use mfish_core::ingest::{LabelCoding, MfishSample};
use mfish_core::metrics::{compute_ccr, confusion, ConfusionMatrix, ErrorMatrix};
use mfish_core::segnet::load_checkpoint;
use mfish_core::train::{fold_dir, Net};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{
    load_samples, matrix_heatmap, read_loocv_summary, with_workers, MatrixStats, TrainSummary, MATRIX_FILE,
    MODEL_FILE, TRAIN_SUMMARY_FILE,
};
use crate::config::{RunConfig, RUN_CONFIG_FILE};
use crate::render::{heatmap, overlay, row_normalise, save_png};
use crate::{io_err, read_json, write_json, CliError, Result};

pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    /// The value recorded by the run (fold result or training summary).
    pub ccr: f64,
    /// CCR of the checkpoint the overlay was rendered from.
    pub checkpoint_ccr: f64,
    pub overlay: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub command: String,
    pub rows: Vec<ReportRow>,
    pub mean_ccr: Option<f64>,
    pub matrix: Option<MatrixStats>,
    pub document: PathBuf,
}

pub fn cmd_report(run_dir: &Path, out: &Path, workers: Option<usize>) -> Result<ReportSummary> {
    let mut cfg: RunConfig = read_json(&run_dir.join(RUN_CONFIG_FILE))?;
    std::fs::create_dir_all(out.join("overlays")).map_err(io_err(out))?;
    let summary = match cfg.command.as_str() {
        "loocv" => loocv_report(run_dir, out, &mut cfg, workers)?,
        "train" => train_report(run_dir, out, &mut cfg, workers)?,
        "hosvd-matrix" => hosvd_report(run_dir, out)?,
        other => return Err(CliError::Config(format!("nothing to report for a `{other}` run"))),
    };
    write_json(&out.join("report_summary.json"), &summary)?;
    info!("report written to {}", summary.document.display());
    Ok(summary)
}

/// (checkpoint CCR, confusion) for one sample, writing its overlay.
fn render_sample(net: &Net, sample: &MfishSample, coding: &LabelCoding, png: &Path) -> Result<(f64, ConfusionMatrix)> {
    let pred = net.predict_labels(sample, coding)?;
    save_png(&overlay(sample.labels.view(), pred.view(), coding), png)?;
    Ok((
        compute_ccr(&pred, &sample.labels, coding)?.ccr,
        confusion(&pred, &sample.labels, coding)?,
    ))
}

fn find_sample<'a>(samples: &'a [MfishSample], id: &str) -> Result<&'a MfishSample> {
    samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CliError::Config(format!("sample {id} is not in the run's manifest")))
}

fn loocv_report(run_dir: &Path, out: &Path, cfg: &mut RunConfig, workers: Option<usize>) -> Result<ReportSummary> {
    let summary = read_loocv_summary(run_dir)?;
    let samples = load_samples(cfg)?;
    let coding = &cfg.coding;
    let rendered: Vec<(ReportRow, ConfusionMatrix)> = with_workers(workers, || {
        summary
            .folds
            .par_iter()
            .enumerate()
            .map(|(i, fold)| {
                // Fall back to the fold directory if the run was moved.
                let local = fold
                    .checkpoint_path
                    .as_ref()
                    .and_then(|p| p.file_name())
                    .map(|name| fold_dir(run_dir, i, &fold.test_id).join(name));
                let ckpt = match (&fold.checkpoint_path, local) {
                    (Some(p), _) if p.is_file() => p.clone(),
                    (_, Some(p)) if p.is_file() => p,
                    _ => return Err(CliError::MissingArtifact(fold_dir(run_dir, i, &fold.test_id))),
                };
                let net = load_checkpoint::<f32>(&ckpt)?.network;
                let sample = find_sample(&samples, &fold.test_id)?;
                let png = out.join("overlays").join(format!("{}.png", fold.test_id));
                let (checkpoint_ccr, conf) = render_sample(&net, sample, coding, &png)?;
                let row = ReportRow {
                    id: fold.test_id.clone(),
                    ccr: fold.final_ccr,
                    checkpoint_ccr,
                    overlay: png,
                };
                Ok((row, conf))
            })
            .collect::<Result<_>>()
    })??;
    finish_segmentation_report(out, cfg, "Leave-one-out", rendered, Some(summary.mean_ccr))
}

fn train_report(run_dir: &Path, out: &Path, cfg: &mut RunConfig, workers: Option<usize>) -> Result<ReportSummary> {
    let summary: TrainSummary = read_json(&run_dir.join(TRAIN_SUMMARY_FILE))?;
    let ckpt = run_dir.join(MODEL_FILE);
    if !ckpt.is_file() {
        return Err(CliError::MissingArtifact(ckpt));
    }
    let net = load_checkpoint::<f32>(&ckpt)?.network;
    let samples = load_samples(cfg)?;
    let coding = &cfg.coding;
    let rendered: Vec<(ReportRow, ConfusionMatrix)> = with_workers(workers, || {
        summary
            .per_sample_ccr
            .par_iter()
            .map(|(id, ccr)| {
                let png = out.join("overlays").join(format!("{id}.png"));
                let (checkpoint_ccr, conf) = render_sample(&net, find_sample(&samples, id)?, coding, &png)?;
                let row = ReportRow {
                    id: id.clone(),
                    ccr: *ccr,
                    checkpoint_ccr,
                    overlay: png,
                };
                Ok((row, conf))
            })
            .collect::<Result<_>>()
    })??;
    finish_segmentation_report(out, cfg, "Training set", rendered, Some(summary.train_ccr))
}

fn write_ccr_table(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["id", "ccr", "checkpoint_ccr"]).map_err(err)?;
    for r in rows {
        w.write_record([r.id.clone(), r.ccr.to_string(), r.checkpoint_ccr.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

fn finish_segmentation_report(
    out: &Path,
    cfg: &RunConfig,
    title: &str,
    rendered: Vec<(ReportRow, ConfusionMatrix)>,
    mean_ccr: Option<f64>,
) -> Result<ReportSummary> {
    let coding = &cfg.coding;
    let mut total = ConfusionMatrix::zeros(coding.num_classes());
    let mut rows = Vec::with_capacity(rendered.len());
    for (row, conf) in rendered {
        total.add(&conf);
        rows.push(row);
    }
    write_ccr_table(&out.join("ccr_table.csv"), &rows)?;
    let names: Vec<String> = coding.chromosome_codes.iter().map(|&c| coding.name(c)).collect();
    save_png(
        &heatmap(row_normalise(&total.counts).view(), &names, &names, 0.0, 1.0),
        &out.join("confusion.png"),
    )?;

    let mut md = String::new();
    let _ = writeln!(md, "# {title} report\n");
    let _ = writeln!(md, "Run command: `{}`, seed {}.\n", cfg.command, cfg.train.seed);
    if let Some(m) = mean_ccr {
        let _ = writeln!(md, "Mean CCR: **{m:.4}**\n");
    }
    let _ = writeln!(md, "| sample | CCR | checkpoint CCR | overlay |\n|---|---|---|---|");
    for r in &rows {
        let png = relative(&r.overlay, out);
        let _ = writeln!(md, "| {} | {:.4} | {:.4} | ![{}]({png}) |", r.id, r.ccr, r.checkpoint_ccr, r.id);
    }
    let _ = writeln!(
        md,
        "\nOverlays: ground truth left, prediction right (shown on ground-truth foreground only); \
         overlap pixels hatched, background transparent.\n"
    );
    let _ = writeln!(md, "## Confusion (row-normalised, truth × prediction)\n");
    let _ = writeln!(md, "Pooled CCR of the rendered checkpoints: {:.4}\n", total.ccr());
    let _ = writeln!(md, "![confusion](confusion.png)");
    let document = out.join(crate::report::REPORT_FILE);
    std::fs::write(&document, md).map_err(io_err(&document))?;
    Ok(ReportSummary {
        command: cfg.command.clone(),
        rows,
        mean_ccr,
        matrix: None,
        document,
    })
}

fn hosvd_report(run_dir: &Path, out: &Path) -> Result<ReportSummary> {
    let path = run_dir.join(MATRIX_FILE);
    if !path.is_file() {
        return Err(CliError::MissingArtifact(path));
    }
    let m = ErrorMatrix::read_csv(&path)?;
    save_png(&matrix_heatmap(&m), &out.join("error_matrix.png"))?;
    let stats = MatrixStats::of(&m);
    let mut md = String::new();
    let _ = writeln!(md, "# HOSVD cross-image report\n");
    let _ = writeln!(md, "Rows: image the models were fitted on. Columns: image classified.\n");
    let _ = writeln!(md, "| statistic | value |\n|---|---|");
    let _ = writeln!(md, "| samples | {} |", stats.samples);
    let _ = writeln!(md, "| diagonal mean | {:.4} |", stats.diagonal_mean);
    let _ = writeln!(md, "| off-diagonal mean | {:.4} |", stats.off_diagonal_mean);
    let _ = writeln!(md, "| best off-diagonal mean | {:.4} |", stats.best_off_diagonal_mean);
    let _ = writeln!(md, "| diagonal-is-max rate | {:.4} |", stats.diagonal_max_rate);
    let _ = writeln!(md, "\n![matrix](error_matrix.png)\n");
    let _ = write!(md, "| train \\ test |");
    for id in &m.ids {
        let _ = write!(md, " {id} |");
    }
    let _ = writeln!(md, "\n|---|{}", "---|".repeat(m.len()));
    for (id, row) in m.ids.iter().zip(m.values.rows()) {
        let _ = write!(md, "| {id} |");
        for v in row {
            let _ = write!(md, " {v:.3} |");
        }
        let _ = writeln!(md);
    }
    let document = out.join(REPORT_FILE);
    std::fs::write(&document, md).map_err(io_err(&document))?;
    Ok(ReportSummary {
        command: "hosvd-matrix".into(),
        rows: Vec::new(),
        mean_ccr: None,
        matrix: Some(stats),
        document,
    })
}
