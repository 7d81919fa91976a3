//! Subcommand implementations behind the `mfishseg` binary.

pub mod commands;
pub mod config;
pub mod render;
pub mod report;

use std::path::PathBuf;

use mfish_core::hosvd::HosvdError;
use mfish_core::ingest::IngestError;
use mfish_core::metrics::MetricsError;
use mfish_core::segnet::SegnetError;
use mfish_core::train::TrainError;
use thiserror::Error;

pub use commands::*;
pub use config::{IngestConfig, RunConfig, RUN_CONFIG_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input not found: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hosvd(#[from] HosvdError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Segnet(#[from] SegnetError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    /// 2 for bad invocations (missing inputs, unusable config), 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingInput(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    if !path.is_file() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}
