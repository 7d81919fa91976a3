//! Patch-based HOSVD classifier and the train-image × test-image CCR matrix.
//!
//! For every chromosome class, patches (patch × row × col × channel) are
//! stacked into a 4-mode tensor and decomposed. A test patch is assigned to
//! the class whose row/col/channel subspaces reconstruct it best, i.e. with
//! the smallest `‖P‖² − ‖P ×₁ U₁ᵀ ×₂ U₂ᵀ ×₃ U₃ᵀ‖²`.

use log::{debug, warn};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{augmentation_rng, LabelCode, LabelCoding, MfishSample};
use crate::metrics::{compute_ccr, ErrorMatrix, MetricsError};

#[derive(Debug, Error)]
pub enum HosvdError {
    #[error("rank {rank} exceeds dimension {dim} of mode {mode}")]
    RankTooLarge { mode: usize, rank: usize, dim: usize },
    #[error("expected {expected} ranks, got {got}")]
    RankCount { expected: usize, got: usize },
    #[error("{0}: no chromosome pixels to sample patches from")]
    NoChromosomePixels(String),
    #[error("no class patch sets to fit")]
    EmptyClassSet,
    #[error("class {0} has no patches")]
    EmptyPatchSet(LabelCode),
    #[error("patch size must be odd and positive, got {0}")]
    PatchSize(usize),
    #[error("the error matrix needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("pair ({train}, {test}): {source}")]
    Pair {
        train: String,
        test: String,
        #[source]
        source: Box<HosvdError>,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Mode-`n` unfolding: rows index mode `n`, columns run over the remaining
/// modes in order.
pub fn unfold(tensor: &ArrayD<f64>, mode: usize) -> Array2<f64> {
    let dim = tensor.shape()[mode];
    let rest = tensor.len() / dim.max(1);
    let mut moved = tensor.view();
    for k in (0..mode).rev() {
        moved.swap_axes(k, k + 1);
    }
    moved
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((dim, rest))
        .expect("contiguous")
}

/// `tensor ×ₙ matrix`: mode `n` (size I) is replaced by the rows of the
/// J×I `matrix`.
pub fn mode_product(tensor: &ArrayD<f64>, matrix: &Array2<f64>, mode: usize) -> ArrayD<f64> {
    let mut shape = tensor.shape().to_vec();
    assert_eq!(matrix.ncols(), shape[mode], "mode product dimension");
    let prod = matrix.dot(&unfold(tensor, mode));
    shape[mode] = matrix.nrows();
    // Undo the axis move of `unfold`.
    let mut moved_shape = vec![shape[mode]];
    moved_shape.extend(shape.iter().enumerate().filter(|&(k, _)| k != mode).map(|(_, &d)| d));
    let mut out = prod.into_shape_with_order(IxDyn(&moved_shape)).expect("contiguous");
    for k in 0..mode {
        out.swap_axes(k, k + 1);
    }
    out.as_standard_layout().into_owned()
}

/// Leading `rank` left singular vectors of `m`, from the eigenvectors of
/// `m mᵀ` sorted by decreasing eigenvalue.
fn leading_left_vectors(m: &Array2<f64>, rank: usize) -> Array2<f64> {
    let rows = m.nrows();
    let gram = m.dot(&m.t());
    let eig = SymmetricEigen::new(DMatrix::from_fn(rows, rows, |i, j| gram[[i, j]]));
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Array2::from_shape_fn((rows, rank), |(i, k)| eig.eigenvectors[(i, order[k])])
}

/// Truncated higher-order SVD: `tensor ≈ core ×₁ U₁ ×₂ U₂ …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub core: ArrayD<f64>,
    /// One (dimension × rank) factor with orthonormal columns per mode.
    pub factors: Vec<Array2<f64>>,
}

impl Decomposition {
    pub fn reconstruct(&self) -> ArrayD<f64> {
        self.factors
            .iter()
            .enumerate()
            .fold(self.core.clone(), |t, (mode, u)| mode_product(&t, u, mode))
    }

    /// Relative Frobenius error of the reconstruction against `tensor`.
    pub fn relative_error(&self, tensor: &ArrayD<f64>) -> f64 {
        let diff = &self.reconstruct() - tensor;
        let norm = tensor.iter().map(|v| v * v).sum::<f64>().sqrt();
        diff.iter().map(|v| v * v).sum::<f64>().sqrt() / norm.max(f64::MIN_POSITIVE)
    }
}

pub fn hosvd_decompose(tensor: &ArrayD<f64>, ranks: &[usize]) -> Result<Decomposition, HosvdError> {
    if ranks.len() != tensor.ndim() {
        return Err(HosvdError::RankCount {
            expected: tensor.ndim(),
            got: ranks.len(),
        });
    }
    for (mode, (&rank, &dim)) in ranks.iter().zip(tensor.shape()).enumerate() {
        if rank > dim {
            return Err(HosvdError::RankTooLarge { mode, rank, dim });
        }
    }
    let factors: Vec<Array2<f64>> = ranks
        .iter()
        .enumerate()
        .map(|(mode, &r)| leading_left_vectors(&unfold(tensor, mode), r))
        .collect();
    let core = factors
        .iter()
        .enumerate()
        .fold(tensor.clone(), |t, (mode, u)| mode_product(&t, &u.t().to_owned(), mode));
    Ok(Decomposition { core, factors })
}

/// Patches of one class, each (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub class_code: LabelCode,
    pub centers: Vec<(usize, usize)>,
    pub patches: Vec<Array3<f64>>,
}

/// `p×p×C` window centred on (y, x), zero outside the image.
pub fn extract_patch(sample: &MfishSample, y: usize, x: usize, patch_size: usize) -> Array3<f64> {
    let (c, h, w) = sample.channels.dim();
    let r = (patch_size / 2) as isize;
    Array3::from_shape_fn((patch_size, patch_size, c), |(i, j, k)| {
        let (sy, sx) = (y as isize + i as isize - r, x as isize + j as isize - r);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            sample.channels[[k, sy as usize, sx as usize]] as f64
        }
    })
}

fn check_patch_size(patch_size: usize) -> Result<(), HosvdError> {
    if patch_size == 0 || patch_size % 2 == 0 {
        return Err(HosvdError::PatchSize(patch_size));
    }
    Ok(())
}

/// Draws up to `n_patches` distinct centres per chromosome class present.
pub fn sample_patches<R: Rng + ?Sized>(
    sample: &MfishSample,
    coding: &LabelCoding,
    n_patches: usize,
    patch_size: usize,
    rng: &mut R,
) -> Result<Vec<PatchSet>, HosvdError> {
    check_patch_size(patch_size)?;
    let lookup = coding.class_lookup();
    let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); coding.num_classes()];
    for ((y, x), &code) in sample.labels.indexed_iter() {
        if let Some(Some(k)) = lookup.get(code as usize) {
            pixels[*k as usize].push((y, x));
        }
    }
    if pixels.iter().all(Vec::is_empty) {
        return Err(HosvdError::NoChromosomePixels(sample.id.clone()));
    }
    let mut out = Vec::new();
    for (k, px) in pixels.iter().enumerate() {
        if px.is_empty() {
            continue;
        }
        let code = coding.chromosome_codes[k];
        let n = n_patches.min(px.len());
        if n < n_patches {
            warn!("{}: class {code} has only {} pixels, using all", sample.id, px.len());
        }
        let centers: Vec<(usize, usize)> = rand::seq::index::sample(rng, px.len(), n)
            .into_iter()
            .map(|i| px[i])
            .collect();
        let patches = centers.iter().map(|&(y, x)| extract_patch(sample, y, x, patch_size)).collect();
        out.push(PatchSet {
            class_code: code,
            centers,
            patches,
        });
    }
    Ok(out)
}

/// Truncation ranks for the (patch, row, col, channel) modes. The patch-mode
/// rank is capped by the number of patches of each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HosvdRanks {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    pub channel: usize,
}

impl Default for HosvdRanks {
    fn default() -> Self {
        Self {
            sample: 30,
            row: 5,
            col: 5,
            channel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub class_code: LabelCode,
    pub decomposition: Decomposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HosvdModel {
    pub classes: Vec<ClassModel>,
    pub ranks: HosvdRanks,
}

/// Stacks each class's patches into a 4-mode tensor and decomposes it.
pub fn fit_class_models(patch_sets: &[PatchSet], ranks: HosvdRanks) -> Result<HosvdModel, HosvdError> {
    if patch_sets.is_empty() {
        return Err(HosvdError::EmptyClassSet);
    }
    let mut classes = Vec::with_capacity(patch_sets.len());
    for set in patch_sets {
        let Some(first) = set.patches.first() else {
            return Err(HosvdError::EmptyPatchSet(set.class_code));
        };
        let (p, q, c) = first.dim();
        let n = set.patches.len();
        let mut tensor = Array4::zeros((n, p, q, c));
        for (i, patch) in set.patches.iter().enumerate() {
            tensor.index_axis_mut(Axis(0), i).assign(patch);
        }
        let want = [ranks.sample, ranks.row, ranks.col, ranks.channel];
        let dims = [n, p, q, c];
        let r: Vec<usize> = want.iter().zip(dims).map(|(&r, d)| r.min(d)).collect();
        if r.as_slice() != want {
            debug!("class {}: ranks {want:?} clamped to {r:?}", set.class_code);
        }
        classes.push(ClassModel {
            class_code: set.class_code,
            decomposition: hosvd_decompose(&tensor.into_dyn(), &r)?,
        });
    }
    Ok(HosvdModel { classes, ranks })
}

/// Squared norm of every patch's projection onto (U₁, U₂, U₃).
fn projected_energy(patches: &Array4<f64>, u_row: &Array2<f64>, u_col: &Array2<f64>, u_ch: &Array2<f64>) -> Vec<f64> {
    let n = patches.len_of(Axis(0));
    let t = patches.view().into_dyn().to_owned();
    let t = mode_product(&t, &u_row.t().to_owned(), 1);
    let t = mode_product(&t, &u_col.t().to_owned(), 2);
    let t = mode_product(&t, &u_ch.t().to_owned(), 3);
    let per = t.len() / n.max(1);
    let t = t.into_shape_with_order((n, per)).expect("contiguous");
    t.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Classifies every ground-truth chromosome pixel of `sample`; all other
/// pixels get the background code. Ties go to the lowest class code.
pub fn classify_pixels(
    model: &HosvdModel,
    sample: &MfishSample,
    patch_size: usize,
    coding: &LabelCoding,
) -> Result<Array2<LabelCode>, HosvdError> {
    check_patch_size(patch_size)?;
    let targets: Vec<(usize, usize)> = sample
        .labels
        .indexed_iter()
        .filter(|(_, &c)| coding.is_chromosome(c))
        .map(|(p, _)| p)
        .collect();
    let mut out = Array2::from_elem(sample.dims(), coding.background_code);
    if targets.is_empty() || model.classes.is_empty() {
        return Ok(out);
    }
    let c = sample.channels.len_of(Axis(0));
    let mut patches = Array4::zeros((targets.len(), patch_size, patch_size, c));
    for (i, &(y, x)) in targets.iter().enumerate() {
        patches.index_axis_mut(Axis(0), i).assign(&extract_patch(sample, y, x, patch_size));
    }
    let norms: Vec<f64> = patches.outer_iter().map(|p| p.iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<&ClassModel> = model.classes.iter().collect();
    order.sort_by_key(|m| m.class_code);
    let mut best = vec![(f64::INFINITY, coding.background_code); targets.len()];
    for m in order {
        let f = &m.decomposition.factors;
        let energy = projected_energy(&patches, &f[1], &f[2], &f[3]);
        for ((b, e), norm) in best.iter_mut().zip(energy).zip(&norms) {
            let err = norm - e;
            if err < b.0 {
                *b = (err, m.class_code);
            }
        }
    }
    for (&(y, x), (_, code)) in targets.iter().zip(best) {
        out[[y, x]] = code;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HosvdParams {
    pub n_patches: usize,
    pub patch_size: usize,
    pub ranks: HosvdRanks,
    pub seed: u64,
}

impl Default for HosvdParams {
    fn default() -> Self {
        Self {
            n_patches: 30,
            patch_size: 11,
            ranks: HosvdRanks::default(),
            seed: 0,
        }
    }
}

/// Fits one model per sample (patches drawn with a stream keyed by the
/// sample id) and scores it on every sample, the diagonal included.
pub fn cross_image_matrix(
    samples: &[MfishSample],
    coding: &LabelCoding,
    params: &HosvdParams,
) -> Result<ErrorMatrix, HosvdError> {
    if samples.len() < 2 {
        return Err(HosvdError::TooFewSamples(samples.len()));
    }
    let models: Vec<HosvdModel> = samples
        .par_iter()
        .map(|s| {
            let mut rng = augmentation_rng(params.seed, &s.id, 0);
            let sets = sample_patches(s, coding, params.n_patches, params.patch_size, &mut rng)?;
            fit_class_models(&sets, params.ranks)
        })
        .collect::<Result<_, _>>()?;
    let n = samples.len();
    let entries: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let pair = |source| HosvdError::Pair {
                train: samples[i].id.clone(),
                test: samples[j].id.clone(),
                source: Box::new(source),
            };
            let pred = classify_pixels(&models[i], &samples[j], params.patch_size, coding).map_err(pair)?;
            let ccr = compute_ccr(&pred, &samples[j].labels, coding).map_err(|e| pair(e.into()))?;
            Ok(ccr.ccr)
        })
        .collect::<Result<_, HosvdError>>()?;
    let ids = samples.iter().map(|s| s.id.clone()).collect();
    Ok(ErrorMatrix::new(ids, Array2::from_shape_vec((n, n), entries).expect("n×n"))?)
}
