//! Loading, curation, preprocessing, augmentation and batching of mFISH
//! samples.

mod augment;
mod batch;
mod coding;
mod manifest;
mod preprocess;
mod raster;
mod sample;

pub use augment::{augment, augmentation_rng, AffineParams, AugmentationConfig};
pub use batch::{sample_input, Batch, BatchIterator};
pub use coding::{LabelCode, LabelCoding};
pub use manifest::{curate, DatasetManifest, ManifestEntry, DEFAULT_EXCLUSIONS};
pub use preprocess::{anchor_crop, dataset_crop, label_bbox, preprocess, scaled_len, BoundingBox, CropWindow};
pub use raster::{read_gray, read_labels, write_gray16, write_labels};
pub use sample::{load_sample, Channel, MfishSample, ProbeSet};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("sample {id}: no path given for the {channel} channel")]
    MissingChannel { id: String, channel: &'static str },
    #[error("failed to decode {}: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{} is not a single-channel 8/16-bit raster", .0.display())]
    NotSingleChannel(PathBuf),
    #[error("sample {id}: {what} is {got:?}, expected {expected:?}")]
    DimensionMismatch {
        id: String,
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("sample {id}: label code {code} is not declared in the label coding")]
    UndeclaredCode { id: String, code: LabelCode },
    #[error("invalid label coding: {0}")]
    InvalidCoding(String),
    #[error("sample {id}: intensity {value} outside [0, 1]")]
    IntensityRange { id: String, value: f32 },
    #[error("manifest {}: {source}", path.display())]
    Manifest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {}: {source}", path.display())]
    ManifestFormat {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("crop {crop:?} exceeds the {width}×{height} frame")]
    CropOutOfBounds { crop: CropWindow, width: usize, height: usize },
    #[error("invalid scale {0}: must satisfy 0 < scale ≤ 1")]
    InvalidScale(f64),
    #[error("invalid augmentation config: {0}")]
    InvalidAugmentation(String),
    #[error("samples have heterogeneous sizes: {first:?} vs {other:?}")]
    HeterogeneousSizes { first: (usize, usize), other: (usize, usize) },
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error("failed to write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}
