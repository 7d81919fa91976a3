use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IngestError, LabelCoding, MfishSample};

/// Ranges the random similarity transform is drawn from. Each range is a
/// closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub rotation_range_deg: [f64; 2],
    pub scale_range: [f64; 2],
    /// Fraction of width (x) and height (y).
    pub translation_range_frac: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_range_deg: [-180.0, 180.0],
            scale_range: [0.9, 1.1],
            translation_range_frac: [-0.1, 0.1],
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_range_deg: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            translation_range_frac: [0.0, 0.0],
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_range_deg == [0.0, 0.0] && self.scale_range == [1.0, 1.0] && self.translation_range_frac == [0.0, 0.0]
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        for (name, [lo, hi]) in [
            ("rotation", self.rotation_range_deg),
            ("scale", self.scale_range),
            ("translation", self.translation_range_frac),
        ] {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(IngestError::InvalidAugmentation(format!("{name} range [{lo}, {hi}]")));
            }
        }
        if self.scale_range[0] <= 0.0 {
            return Err(IngestError::InvalidAugmentation("scale range must be strictly positive".into()));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let mut uniform = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        AffineParams {
            rotation_deg: uniform(self.rotation_range_deg),
            scale: uniform(self.scale_range),
            shift_x_frac: uniform(self.translation_range_frac),
            shift_y_frac: uniform(self.translation_range_frac),
        }
    }
}

/// Deterministic stream for one (seed, sample, epoch) triple, independent of
/// the order samples are processed in.
pub fn augmentation_rng(seed: u64, sample_id: &str, epoch: u64) -> ChaCha8Rng {
    // FNV-1a over the id keeps the stream stable across toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17));
    rng.set_stream(epoch);
    rng
}

/// A similarity transform about the image centre: rotate, scale, then shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shift_x_frac: f64,
    pub shift_y_frac: f64,
}

impl AffineParams {
    /// Applies the transform to every channel (bilinear, zero outside) and
    /// the label map (nearest, background outside).
    pub fn apply(&self, sample: &MfishSample, coding: &LabelCoding) -> MfishSample {
        let (h, w) = sample.dims();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let (tx, ty) = (self.shift_x_frac * w as f64, self.shift_y_frac * h as f64);
        // Inverse map: output p' ↦ source p = R(−θ)(p' − c − t)/s + c.
        let source = |y: usize, x: usize| -> (f64, f64) {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = (cos * dx + sin * dy) / self.scale + cx;
            let sy = (-sin * dx + cos * dy) / self.scale + cy;
            (sy, sx)
        };
        let coords: Vec<(f64, f64)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| source(y, x)).collect();

        let mut channels = Array3::zeros(sample.channels.raw_dim());
        for (src, mut dst) in sample.channels.outer_iter().zip(channels.outer_iter_mut()) {
            for (i, v) in dst.iter_mut().enumerate() {
                let (sy, sx) = coords[i];
                *v = bilinear_zero(&src, sy, sx);
            }
        }
        let labels = Array2::from_shape_fn((h, w), |(y, x)| {
            let (sy, sx) = coords[y * w + x];
            let (ry, rx) = (sy.round(), sx.round());
            if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
                coding.background_code
            } else {
                sample.labels[[ry as usize, rx as usize]]
            }
        });
        MfishSample {
            id: sample.id.clone(),
            channels,
            labels,
            probe_set: sample.probe_set,
        }
    }
}

/// Bilinear sample with zero outside the frame.
fn bilinear_zero(plane: &ndarray::ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = plane.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[[yy as usize, xx as usize]] as f64
        }
    };
    let v = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
        + at(y0, x0 + 1.0) * (1.0 - ty) * tx
        + at(y0 + 1.0, x0) * ty * (1.0 - tx)
        + at(y0 + 1.0, x0 + 1.0) * ty * tx;
    v.clamp(0.0, 1.0) as f32
}

/// Draws one transform from `config` and applies it to the sample.
pub fn augment<R: Rng + ?Sized>(
    sample: &MfishSample,
    config: &AugmentationConfig,
    coding: &LabelCoding,
    rng: &mut R,
) -> MfishSample {
    if config.is_identity() {
        return sample.clone();
    }
    config.draw(rng).apply(sample, coding)
}
