use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{read_gray, read_labels, IngestError, LabelCode, LabelCoding, ManifestEntry};

/// Fluorophore channels in the fixed order they are stacked in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Aqua,
    FarRed,
    Green,
    Red,
    Gold,
    Dapi,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::Aqua,
        Channel::FarRed,
        Channel::Green,
        Channel::Red,
        Channel::Gold,
        Channel::Dapi,
    ];
    pub const COUNT: usize = 6;

    /// Key used in manifests.
    pub fn key(self) -> &'static str {
        match self {
            Channel::Aqua => "aqua",
            Channel::FarRed => "far_red",
            Channel::Green => "green",
            Channel::Red => "red",
            Channel::Gold => "gold",
            Channel::Dapi => "dapi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSet {
    #[default]
    Vysis,
    Asi,
    Psi,
}

/// One cell: six registered channel images in [0, 1] plus its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct MfishSample {
    pub id: String,
    /// (channel, H, W), channels in [`Channel::ALL`] order.
    pub channels: Array3<f32>,
    pub labels: Array2<LabelCode>,
    pub probe_set: ProbeSet,
}

impl MfishSample {
    /// Builds a sample after checking shape, intensity range and label codes.
    pub fn new(
        id: impl Into<String>,
        channels: Array3<f32>,
        labels: Array2<LabelCode>,
        probe_set: ProbeSet,
        coding: &LabelCoding,
    ) -> Result<Self, IngestError> {
        let id = id.into();
        let (c, h, w) = channels.dim();
        if c != Channel::COUNT {
            return Err(IngestError::DimensionMismatch {
                id,
                what: "channel count".into(),
                expected: (Channel::COUNT, 0),
                got: (c, 0),
            });
        }
        if labels.dim() != (h, w) {
            return Err(IngestError::DimensionMismatch {
                id,
                what: "label map".into(),
                expected: (h, w),
                got: labels.dim(),
            });
        }
        if let Some(&v) = channels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(IngestError::IntensityRange { id, value: v });
        }
        if let Some(&code) = labels.iter().find(|&&c| !coding.is_declared(c)) {
            return Err(IngestError::UndeclaredCode { id, code });
        }
        Ok(Self {
            id,
            channels,
            labels,
            probe_set,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    /// (H, W)
    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn channel(&self, c: Channel) -> ndarray::ArrayView2<'_, f32> {
        self.channels.index_axis(Axis(0), c as usize)
    }

    pub fn chromosome_pixels(&self, coding: &LabelCoding) -> usize {
        self.labels.iter().filter(|&&c| coding.is_chromosome(c)).count()
    }
}

/// Reads the six channel rasters and the label raster of one manifest entry.
pub fn load_sample(entry: &ManifestEntry, coding: &LabelCoding) -> Result<MfishSample, IngestError> {
    let mut planes = Vec::with_capacity(Channel::COUNT);
    for ch in Channel::ALL {
        let path = entry.channels.get(ch.key()).ok_or(IngestError::MissingChannel {
            id: entry.id.clone(),
            channel: ch.key(),
        })?;
        if !path.is_file() {
            return Err(IngestError::MissingFile(path.clone()));
        }
        planes.push((ch, path));
    }
    if !entry.labels.is_file() {
        return Err(IngestError::MissingFile(entry.labels.clone()));
    }
    let labels = read_labels(&entry.labels)?;
    let (h, w) = labels.dim();
    let mut channels = Array3::zeros((Channel::COUNT, h, w));
    for (ch, path) in planes {
        let img = read_gray(path)?;
        if img.dim() != (h, w) {
            return Err(IngestError::DimensionMismatch {
                id: entry.id.clone(),
                what: format!("{} channel", ch.key()),
                expected: (h, w),
                got: img.dim(),
            });
        }
        channels.index_axis_mut(Axis(0), ch as usize).assign(&img);
    }
    MfishSample::new(entry.id.clone(), channels, labels, entry.probe_set, coding)
}
