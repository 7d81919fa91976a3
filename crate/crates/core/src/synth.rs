//! Synthetic six-channel karyotype images with known ground truth.
//!
//! Every chromosome class gets a distinct on/off signature over the five
//! combinatorial fluorophores (DAPI counterstains every chromosome). Each
//! image places one rod-shaped chromosome per class on a jittered grid in a
//! random arrangement, optionally adds crossing rods whose intersections are
//! labelled as overlap, then applies a per-image, per-channel exposure offset
//! and Gaussian pixel noise.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{
    write_gray16, write_labels, Channel, DatasetManifest, IngestError, LabelCode, LabelCoding, ManifestEntry,
    MfishSample, ProbeSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    /// Fluorophore level where a signature bit is on / off.
    pub on_level: f64,
    pub off_level: f64,
    pub dapi_level: f64,
    pub background_level: f64,
    /// Standard deviation of additive per-pixel noise.
    pub noise_sigma: f64,
    /// Per-image, per-channel additive offset drawn from U(−e, e).
    pub exposure_offset: f64,
    /// Extra rods per image laid across existing chromosomes.
    pub crossings: usize,
    pub rod_half_width: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 8,
            height: 96,
            width: 96,
            on_level: 0.85,
            off_level: 0.08,
            dapi_level: 0.7,
            background_level: 0.03,
            noise_sigma: 0.03,
            exposure_offset: 0.05,
            crossings: 2,
            rod_half_width: 2.2,
            seed: 7,
        }
    }
}

/// 24 distinct fluorophore combinations: all single, double and triple
/// labellings of five dyes (25), minus the last triple.
pub fn signatures() -> Vec<[bool; 5]> {
    let mut codes: Vec<u32> = (1u32..32).filter(|c| c.count_ones() <= 3).collect();
    codes.sort_by_key(|c| (c.count_ones(), *c));
    codes.truncate(LabelCoding::NUM_CLASSES);
    codes
        .into_iter()
        .map(|c| std::array::from_fn(|bit| c & (1 << bit) != 0))
        .collect()
}

struct Rod {
    class: usize,
    cy: f64,
    cx: f64,
    dy: f64,
    dx: f64,
    half_len: f64,
}

impl Rod {
    fn contains(&self, y: f64, x: f64, half_width: f64) -> bool {
        // distance from (y, x) to the rod's centre segment
        let (py, px) = (y - self.cy, x - self.cx);
        let t = (py * self.dy + px * self.dx).clamp(-self.half_len, self.half_len);
        let (ey, ex) = (py - t * self.dy, px - t * self.dx);
        ey * ey + ex * ex <= half_width * half_width
    }
}

fn random_rod<R: Rng>(rng: &mut R, class: usize, cy: f64, cx: f64, max_half_len: f64) -> Rod {
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (dy, dx) = theta.sin_cos();
    Rod {
        class,
        cy,
        cx,
        dy,
        dx,
        half_len: rng.random_range(0.7..=1.0) * max_half_len,
    }
}

/// Generates one image; `rng` drives layout, exposure and noise.
pub fn generate_sample<R: Rng>(
    id: &str,
    config: &SynthConfig,
    coding: &LabelCoding,
    rng: &mut R,
) -> Result<MfishSample, IngestError> {
    let (h, w) = (config.height, config.width);
    let classes = coding.num_classes();
    let (grid_rows, grid_cols) = (4, classes.div_ceil(4));
    let (cell_h, cell_w) = (h as f64 / grid_rows as f64, w as f64 / grid_cols as f64);
    let hw = config.rod_half_width;

    let mut cells: Vec<usize> = (0..grid_rows * grid_cols).collect();
    cells.shuffle(rng);
    let mut rods = Vec::new();
    for class in 0..classes {
        let cell = cells[class];
        let (r, c) = (cell / grid_cols, cell % grid_cols);
        let jitter = 0.1 * cell_h.min(cell_w);
        let cy = (r as f64 + 0.5) * cell_h + rng.random_range(-jitter..=jitter);
        let cx = (c as f64 + 0.5) * cell_w + rng.random_range(-jitter..=jitter);
        let mut rod = random_rod(rng, class, cy, cx, 1.0);
        // Lay the rod roughly along the cell's long axis.
        let base = if cell_h >= cell_w { std::f64::consts::FRAC_PI_2 } else { 0.0 };
        let theta = base + rng.random_range(-0.6..=0.6);
        (rod.dy, rod.dx) = theta.sin_cos();
        // Longest rod that stays inside its cell.
        let room_y = cell_h / 2.0 - hw - 1.0 - jitter;
        let room_x = cell_w / 2.0 - hw - 1.0 - jitter;
        let fit = (room_y / rod.dy.abs().max(1e-9)).min(room_x / rod.dx.abs().max(1e-9)).max(1.0);
        rod.half_len *= fit;
        rods.push(rod);
    }
    // Each crossing gets its own host chromosome so no class is buried.
    let hosts: Vec<usize> = rand::seq::index::sample(rng, classes, config.crossings.min(classes)).into_vec();
    for host in hosts {
        // A second copy of some chromosome laid across another one.
        let host = &rods[host];
        let (cy, cx) = (host.cy, host.cx);
        let class = loop {
            let k = rng.random_range(0..classes);
            if k != host.class {
                break k;
            }
        };
        let mut rod = random_rod(rng, class, cy, cx, cell_h.min(cell_w) * 0.45);
        // Roughly perpendicular to the host so the two really cross.
        let (dy, dx) = (host.dy, host.dx);
        rod.dy = dx;
        rod.dx = -dy;
        rods.push(rod);
    }

    let sigs = signatures();
    let mut labels = Array2::from_elem((h, w), coding.background_code);
    let mut clean = Array3::from_elem((Channel::COUNT, h, w), config.background_level);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut hit: Option<usize> = None;
            let mut overlap = false;
            for rod in &rods {
                if !rod.contains(py, px, hw) {
                    continue;
                }
                match hit {
                    None => hit = Some(rod.class),
                    Some(k) if k != rod.class => overlap = true,
                    _ => {}
                }
                for (ch, &on) in sigs[rod.class].iter().enumerate() {
                    let level = if on { config.on_level } else { config.off_level };
                    clean[[ch, y, x]] = f64::max(clean[[ch, y, x]], level);
                }
                clean[[Channel::Dapi as usize, y, x]] = config.dapi_level;
            }
            if let Some(k) = hit {
                labels[[y, x]] = if overlap {
                    coding.overlap_code
                } else {
                    coding.chromosome_codes[k]
                };
            }
        }
    }

    let offsets: Vec<f64> = (0..Channel::COUNT)
        .map(|_| {
            if config.exposure_offset > 0.0 {
                rng.random_range(-config.exposure_offset..=config.exposure_offset)
            } else {
                0.0
            }
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0))
        .map_err(|e| IngestError::InvalidAugmentation(format!("noise sigma: {e}")))?;
    let channels = Array3::from_shape_fn((Channel::COUNT, h, w), |(c, y, x)| {
        let n = if config.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        (clean[[c, y, x]] + offsets[c] + n).clamp(0.0, 1.0) as f32
    });
    MfishSample::new(id, channels, labels, ProbeSet::Vysis, coding)
}

/// `config.num_images` images with ids `S001`, `S002`, …
pub fn generate_dataset(config: &SynthConfig, coding: &LabelCoding) -> Result<Vec<MfishSample>, IngestError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_images)
        .map(|i| generate_sample(&format!("S{:03}", i + 1), config, coding, &mut rng))
        .collect()
}

/// Writes each sample as six 16-bit channel PNGs plus a label PNG and
/// returns the manifest (also saved as `manifest.json`), with an empty
/// exclusion list.
pub fn write_dataset(samples: &[MfishSample], dir: &Path) -> Result<DatasetManifest, IngestError> {
    std::fs::create_dir_all(dir).map_err(|source| IngestError::Write {
        path: dir.to_path_buf(),
        source: source.into(),
    })?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let mut channels = BTreeMap::new();
        for ch in Channel::ALL {
            let name = format!("{}_{}.png", s.id, ch.key());
            write_gray16(&dir.join(&name), &s.channel(ch).to_owned())?;
            channels.insert(ch.key().to_string(), name.into());
        }
        let labels = format!("{}_labels.png", s.id);
        write_labels(&dir.join(&labels), &s.labels)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            channels,
            labels: labels.into(),
            probe_set: s.probe_set,
        });
    }
    let mut manifest = DatasetManifest::new(entries);
    manifest.exclusion_list.clear();
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Label code histogram, useful for summaries.
pub fn label_histogram(sample: &MfishSample) -> BTreeMap<LabelCode, usize> {
    let mut out = BTreeMap::new();
    for &c in &sample.labels {
        *out.entry(c).or_insert(0) += 1;
    }
    out
}
