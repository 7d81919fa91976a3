use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_sample, IngestError, LabelCoding, MfishSample, ProbeSet};

/// Vysis images removed for ill-hybridisation, wrong exposure, channel
/// cross-talk, channel misalignment or wrong probe labels.
pub const DEFAULT_EXCLUSIONS: [&str; 14] = [
    "V250253", "V260754", "V260856", "V290162", "V290362", "V270259", "V280162", "V290962", "V291562",
    "V1701XY", "V1702XY", "V1703XY", "V1402XX", "V190442",
];

fn default_exclusions() -> Vec<String> {
    DEFAULT_EXCLUSIONS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Channel key (`aqua`, `far_red`, `green`, `red`, `gold`, `dapi`) → raster path.
    pub channels: BTreeMap<String, PathBuf>,
    pub labels: PathBuf,
    #[serde(default)]
    pub probe_set: ProbeSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
    #[serde(rename = "exclude", default = "default_exclusions")]
    pub exclusion_list: Vec<String>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<ManifestEntry>) -> Self {
        Self {
            samples,
            exclusion_list: default_exclusions(),
        }
    }

    /// Reads a manifest; relative raster paths are resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|source| IngestError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|source| IngestError::ManifestFormat {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut manifest.samples {
            for p in entry.channels.values_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if entry.labels.is_relative() {
                entry.labels = base.join(&entry.labels);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|source| IngestError::Manifest {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Vysis entries not on the exclusion list, sorted by id.
    pub fn curated_entries(&self) -> Vec<&ManifestEntry> {
        let excluded: BTreeSet<&str> = self.exclusion_list.iter().map(String::as_str).collect();
        let mut kept: Vec<&ManifestEntry> = self
            .samples
            .iter()
            .filter(|e| !excluded.contains(e.id.as_str()))
            .filter(|e| {
                if e.probe_set != ProbeSet::Vysis {
                    warn!("skipping {}: only Vysis samples are processed", e.id);
                }
                e.probe_set == ProbeSet::Vysis
            })
            .collect();
        kept.sort_by(|a, b| a.id.cmp(&b.id));
        kept
    }
}

/// Loads every curated entry of `manifest`, sorted by id.
pub fn curate(manifest: &DatasetManifest, coding: &LabelCoding) -> Result<Vec<MfishSample>, IngestError> {
    coding.validate()?;
    manifest
        .curated_entries()
        .into_par_iter()
        .map(|e| load_sample(e, coding))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> ManifestEntry {
        ManifestEntry {
            id: id.to_string(),
            channels: BTreeMap::new(),
            labels: PathBuf::from(format!("{id}.png")),
            probe_set: ProbeSet::Vysis,
        }
    }

    #[test]
    fn default_exclusions_drop_fourteen_of_eighty_four() {
        let mut ids: Vec<String> = DEFAULT_EXCLUSIONS.iter().map(|s| s.to_string()).collect();
        ids.extend((0..70).map(|i| format!("V{:06}", 300000 + i)));
        let manifest = DatasetManifest::new(ids.iter().map(|id| entry(id)).collect());
        assert_eq!(manifest.samples.len(), 84);
        let kept = manifest.curated_entries();
        assert_eq!(kept.len(), 70);
        assert!(kept.iter().all(|e| !DEFAULT_EXCLUSIONS.contains(&e.id.as_str())));
        assert!(kept.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn empty_exclusion_list_keeps_everything() {
        let mut m = DatasetManifest::new(vec![entry("V2"), entry("V1"), entry("V250253")]);
        m.exclusion_list.clear();
        let ids: Vec<_> = m.curated_entries().iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids, ["V1", "V2", "V250253"]);
    }

    #[test]
    fn only_excluded_ids_yield_nothing() {
        let m = DatasetManifest::new(DEFAULT_EXCLUSIONS.iter().map(|id| entry(id)).collect());
        assert!(m.curated_entries().is_empty());
        assert!(curate(&m, &LabelCoding::default()).unwrap().is_empty());
    }

    #[test]
    fn non_vysis_entries_are_skipped() {
        let mut a = entry("A01");
        a.probe_set = ProbeSet::Asi;
        let m = DatasetManifest::new(vec![a, entry("V01")]);
        assert_eq!(m.curated_entries().len(), 1);
    }

    #[test]
    fn json_without_exclude_uses_defaults() {
        let m: DatasetManifest = serde_json::from_str(r#"{"samples": []}"#).unwrap();
        assert_eq!(m.exclusion_list.len(), 14);
        let m: DatasetManifest = serde_json::from_str(r#"{"samples": [], "exclude": []}"#).unwrap();
        assert!(m.exclusion_list.is_empty());
    }
}
