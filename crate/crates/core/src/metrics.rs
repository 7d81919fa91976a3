//! Correct classification ratio, confusion matrices and train×test error
//! matrices.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{LabelCode, LabelCoding};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction {pred:?} and ground truth {truth:?} differ in shape")]
    ShapeMismatch { pred: (usize, usize), truth: (usize, usize) },
    #[error("ground truth has no chromosome pixels")]
    NoChromosomePixels,
    #[error("cannot average the last {k} of {len} values")]
    NotEnoughValues { len: usize, k: usize },
    #[error("error matrix: {0}")]
    Matrix(String),
    #[error("error matrix file {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Pixel counts behind a CCR value. `per_class` maps a chromosome code to
/// (correct, total).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcrReport {
    pub correct: u64,
    pub total: u64,
    pub ccr: f64,
    pub per_class: BTreeMap<LabelCode, (u64, u64)>,
}

impl CcrReport {
    fn empty() -> Self {
        Self {
            correct: 0,
            total: 0,
            ccr: 0.0,
            per_class: BTreeMap::new(),
        }
    }

    /// Pools the pixel counts of several reports (micro-average).
    pub fn merge<'a>(reports: impl IntoIterator<Item = &'a CcrReport>) -> Result<Self, MetricsError> {
        let mut out = Self::empty();
        for r in reports {
            out.correct += r.correct;
            out.total += r.total;
            for (&code, &(c, t)) in &r.per_class {
                let e = out.per_class.entry(code).or_insert((0, 0));
                e.0 += c;
                e.1 += t;
            }
        }
        if out.total == 0 {
            return Err(MetricsError::NoChromosomePixels);
        }
        out.ccr = out.correct as f64 / out.total as f64;
        Ok(out)
    }

    /// Mean of per-class accuracies over the classes present.
    pub fn macro_ccr(&self) -> f64 {
        let present: Vec<f64> = self
            .per_class
            .values()
            .filter(|(_, t)| *t > 0)
            .map(|&(c, t)| c as f64 / t as f64)
            .collect();
        present.iter().sum::<f64>() / present.len().max(1) as f64
    }
}

fn check_shapes(pred: &Array2<LabelCode>, truth: &Array2<LabelCode>) -> Result<(), MetricsError> {
    if pred.dim() != truth.dim() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.dim(),
            truth: truth.dim(),
        });
    }
    Ok(())
}

/// Fraction of ground-truth chromosome pixels whose predicted code matches.
/// Background and overlap pixels are ignored whatever was predicted there.
pub fn compute_ccr(
    pred: &Array2<LabelCode>,
    truth: &Array2<LabelCode>,
    coding: &LabelCoding,
) -> Result<CcrReport, MetricsError> {
    check_shapes(pred, truth)?;
    let lookup = coding.class_lookup();
    let mut out = CcrReport::empty();
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if !matches!(lookup.get(t as usize), Some(Some(_))) {
            continue;
        }
        let e = out.per_class.entry(t).or_insert((0, 0));
        e.1 += 1;
        out.total += 1;
        if p == t {
            e.0 += 1;
            out.correct += 1;
        }
    }
    if out.total == 0 {
        return Err(MetricsError::NoChromosomePixels);
    }
    out.ccr = out.correct as f64 / out.total as f64;
    Ok(out)
}

/// Rows are truth classes and columns predicted classes, both in class-index
/// order. Chromosome pixels predicted as a non-chromosome code are counted in
/// `unassigned` for their row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub unassigned: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: Array2::zeros((classes, classes)),
            unassigned: vec![0; classes],
        }
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
        for (a, b) in self.unassigned.iter_mut().zip(&other.unassigned) {
            *a += b;
        }
    }

    pub fn trace(&self) -> u64 {
        self.counts.diag().sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts
            .rows()
            .into_iter()
            .zip(&self.unassigned)
            .map(|(r, u)| r.sum() + u)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum() + self.unassigned.iter().sum::<u64>()
    }

    pub fn ccr(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

pub fn confusion(
    pred: &Array2<LabelCode>,
    truth: &Array2<LabelCode>,
    coding: &LabelCoding,
) -> Result<ConfusionMatrix, MetricsError> {
    check_shapes(pred, truth)?;
    let lookup = coding.class_lookup();
    let class = |code: LabelCode| lookup.get(code as usize).copied().flatten().map(usize::from);
    let mut m = ConfusionMatrix::zeros(coding.num_classes());
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let Some(row) = class(t) else { continue };
        match class(p) {
            Some(col) => m.counts[[row, col]] += 1,
            None => m.unassigned[row] += 1,
        }
    }
    if m.total() == 0 {
        return Err(MetricsError::NoChromosomePixels);
    }
    Ok(m)
}

/// Arithmetic mean of the final `k` values.
pub fn average_last_k(values: &[f64], k: usize) -> Result<f64, MetricsError> {
    if k == 0 || values.len() < k {
        return Err(MetricsError::NotEnoughValues { len: values.len(), k });
    }
    Ok(values[values.len() - k..].iter().sum::<f64>() / k as f64)
}

/// Entry (i, j) is the CCR on sample j of a classifier built from sample i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    pub ids: Vec<String>,
    pub values: Array2<f64>,
}

impl ErrorMatrix {
    pub fn new(ids: Vec<String>, values: Array2<f64>) -> Result<Self, MetricsError> {
        let n = ids.len();
        if values.dim() != (n, n) {
            return Err(MetricsError::Matrix(format!(
                "{n} ids but values are {:?}",
                values.dim()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MetricsError::Matrix(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { ids, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn diagonal_mean(&self) -> f64 {
        self.values.diag().mean().unwrap_or(f64::NAN)
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return f64::NAN;
        }
        let off = self.values.sum() - self.values.diag().sum();
        off / (n * (n - 1)) as f64
    }

    /// For each tested sample, the best CCR among classifiers trained on a
    /// different sample; averaged over tested samples.
    pub fn best_off_diagonal_mean(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return f64::NAN;
        }
        let best: f64 = (0..n)
            .map(|j| {
                (0..n)
                    .filter(|&i| i != j)
                    .map(|i| self.values[[i, j]])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        best / n as f64
    }

    /// Fraction of tested samples whose highest CCR came from the classifier
    /// trained on that same sample (ties count as maximal).
    pub fn diagonal_max_rate(&self) -> f64 {
        let n = self.len();
        let hits = (0..n)
            .filter(|&j| (0..n).all(|i| self.values[[i, j]] <= self.values[[j, j]]))
            .count();
        hits as f64 / n.max(1) as f64
    }

    /// CSV with a header row `train\test,id…` and one row per training id.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let err = |source| MetricsError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["train\\test".to_string()];
        header.extend(self.ids.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for (id, row) in self.ids.iter().zip(self.values.rows()) {
            let mut record = vec![id.clone()];
            // `{}` on f64 prints the shortest string that parses back exactly.
            record.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&record).map_err(err)?;
        }
        w.flush().map_err(|e| err(e.into()))
    }

    pub fn read_csv(path: &Path) -> Result<Self, MetricsError> {
        let err = |source| MetricsError::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(err)?;
        let ids: Vec<String> = r.headers().map_err(err)?.iter().skip(1).map(str::to_string).collect();
        let n = ids.len();
        let mut values = Array2::zeros((n, n));
        let mut rows = 0;
        for (i, record) in r.records().enumerate() {
            let record = record.map_err(err)?;
            if i >= n || record.len() != n + 1 || record[0] != ids[i] {
                return Err(MetricsError::Matrix(format!("malformed row {i} in {}", path.display())));
            }
            for j in 0..n {
                values[[i, j]] = record[j + 1]
                    .parse()
                    .map_err(|e| MetricsError::Matrix(format!("row {i}, column {j}: {e}")))?;
            }
            rows += 1;
        }
        if rows != n {
            return Err(MetricsError::Matrix(format!("expected {n} rows, found {rows}")));
        }
        Self::new(ids, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_prediction_is_perfect() {
        let truth = array![[0, 1, 2], [255, 24, 3]];
        let r = compute_ccr(&truth, &truth, &LabelCoding::default()).unwrap();
        assert_eq!((r.correct, r.total, r.ccr), (4, 4, 1.0));
    }

    #[test]
    fn background_is_ignored() {
        let truth = array![[1, 1, 0], [2, 2, 0]];
        let pred = array![[1, 1, 7], [2, 9, 3]];
        let r = compute_ccr(&pred, &truth, &LabelCoding::default()).unwrap();
        assert_eq!(r.ccr, 0.75);
        assert_eq!(r.per_class[&2], (1, 2));
        let t: u64 = r.per_class.values().map(|p| p.1).sum();
        assert_eq!(t, r.total);
    }

    #[test]
    fn no_chromosome_pixels_is_an_error() {
        let truth = array![[0, 255]];
        assert!(matches!(
            compute_ccr(&truth, &truth, &LabelCoding::default()),
            Err(MetricsError::NoChromosomePixels)
        ));
        assert!(compute_ccr(&array![[1]], &array![[1, 1]], &LabelCoding::default()).is_err());
    }

    #[test]
    fn random_prediction_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 240 * 240;
        let truth = Array2::from_shape_fn((240, 240), |(y, x)| ((y * 240 + x) % 24 + 1) as u16);
        let pred = Array2::from_shape_fn((240, 240), |_| rng.random_range(1..=24u16));
        let r = compute_ccr(&pred, &truth, &LabelCoding::default()).unwrap();
        let p = 1.0 / 24.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r.ccr - p).abs() < 3.0 * sigma, "ccr {}", r.ccr);
    }

    #[test]
    fn confusion_trace_matches_ccr() {
        let truth = array![[1, 1, 0, 5], [2, 2, 255, 5]];
        let pred = array![[1, 2, 0, 5], [2, 0, 1, 5]];
        let coding = LabelCoding::default();
        let m = confusion(&pred, &truth, &coding).unwrap();
        let r = compute_ccr(&pred, &truth, &coding).unwrap();
        assert_eq!(m.ccr(), r.ccr);
        assert_eq!(m.row_totals()[1], r.per_class[&2].1);
        assert_eq!(m.unassigned[1], 1);
        let perfect = confusion(&truth, &truth, &coding).unwrap();
        assert_eq!(perfect.trace(), perfect.total());
    }

    #[test]
    fn last_k_average() {
        assert!((average_last_k(&[0.8, 0.9, 1.0], 3).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(average_last_k(&[0.1, 0.2, 0.7], 1).unwrap(), 0.7);
        assert_eq!(average_last_k(&[0.4; 6], 5).unwrap(), 0.4);
        assert!(average_last_k(&[0.4; 2], 3).is_err());
    }

    #[test]
    fn merge_pools_counts() {
        let coding = LabelCoding::default();
        let a = compute_ccr(&array![[1, 1]], &array![[1, 1]], &coding).unwrap();
        let b = compute_ccr(&array![[2, 2, 2, 2]], &array![[1, 1, 1, 1]], &coding).unwrap();
        let m = CcrReport::merge([&a, &b]).unwrap();
        assert_eq!((m.correct, m.total), (2, 6));
        assert!((m.ccr - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn error_matrix_summaries_and_round_trip() {
        let values = array![[0.9, 0.6, 0.7], [0.5, 0.95, 0.8], [0.4, 0.65, 0.75]];
        let m = ErrorMatrix::new(vec!["a".into(), "b".into(), "c".into()], values).unwrap();
        assert!((m.diagonal_mean() - 0.8666666666666667).abs() < 1e-12);
        assert!((m.off_diagonal_mean() - 3.65 / 6.0).abs() < 1e-12);
        // best off-diagonal per column: 0.5, 0.65, 0.8
        assert!((m.best_off_diagonal_mean() - 1.95 / 3.0).abs() < 1e-12);
        // column c: 0.8 from b beats the self-trained 0.75
        assert!((m.diagonal_max_rate() - 2.0 / 3.0).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        assert_eq!(ErrorMatrix::read_csv(&path).unwrap(), m);
    }

    #[test]
    fn error_matrix_validates() {
        assert!(ErrorMatrix::new(vec!["a".into()], Array2::zeros((2, 2))).is_err());
        assert!(ErrorMatrix::new(vec!["a".into()], array![[1.5]]).is_err());
    }
}
