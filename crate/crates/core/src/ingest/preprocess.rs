use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{IngestError, LabelCode, LabelCoding, MfishSample};

/// Rectangular window in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl CropWindow {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            left: 0,
            top: 0,
            width,
            height,
        }
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        self.width > 0 && self.height > 0 && self.left + self.width <= width && self.top + self.height <= height
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min_row: usize,
    pub max_row: usize,
    pub min_col: usize,
    pub max_col: usize,
}

impl BoundingBox {
    pub fn union(self, other: Self) -> Self {
        Self {
            min_row: self.min_row.min(other.min_row),
            max_row: self.max_row.max(other.max_row),
            min_col: self.min_col.min(other.min_col),
            max_col: self.max_col.max(other.max_col),
        }
    }
}

/// `floor(len · scale)`, tolerant of binary round-off so that e.g.
/// 490 · 0.7 gives 343 rather than 342.
pub fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale + 1e-9).floor() as usize).max(1)
}

/// Bounding box of every non-background pixel.
pub fn label_bbox(sample: &MfishSample, coding: &LabelCoding) -> Option<BoundingBox> {
    let mut bbox: Option<BoundingBox> = None;
    for ((r, c), &code) in sample.labels.indexed_iter() {
        if code == coding.background_code {
            continue;
        }
        let px = BoundingBox {
            min_row: r,
            max_row: r,
            min_col: c,
            max_col: c,
        };
        bbox = Some(bbox.map_or(px, |b| b.union(px)));
    }
    bbox
}

/// Places a `width`×`height` window centred on `bbox` (or on the frame when
/// there is none), shrinking it to the frame and shifting it inside.
pub fn anchor_crop(
    bbox: Option<BoundingBox>,
    width: usize,
    height: usize,
    frame_width: usize,
    frame_height: usize,
) -> CropWindow {
    let width = width.min(frame_width);
    let height = height.min(frame_height);
    let (cy, cx) = match bbox {
        Some(b) => ((b.min_row + b.max_row + 1) / 2, (b.min_col + b.max_col + 1) / 2),
        None => (frame_height / 2, frame_width / 2),
    };
    let place = |centre: usize, size: usize, frame: usize| centre.saturating_sub(size / 2).min(frame - size);
    CropWindow {
        left: place(cx, width, frame_width),
        top: place(cy, height, frame_height),
        width,
        height,
    }
}

/// One crop for a whole dataset: the window anchored on the union of all
/// samples' label bounding boxes.
pub fn dataset_crop(
    samples: &[MfishSample],
    coding: &LabelCoding,
    width: usize,
    height: usize,
) -> Result<CropWindow, IngestError> {
    let Some(first) = samples.first() else {
        return Ok(CropWindow::full(width, height));
    };
    let dims = first.dims();
    let mut bbox = None;
    for s in samples {
        if s.dims() != dims {
            return Err(IngestError::HeterogeneousSizes {
                first: dims,
                other: s.dims(),
            });
        }
        if let Some(b) = label_bbox(s, coding) {
            bbox = Some(bbox.map_or(b, |a: BoundingBox| a.union(b)));
        }
    }
    Ok(anchor_crop(bbox, width, height, dims.1, dims.0))
}

/// Source coordinate of output index `o` for pixel-centre alignment.
#[inline]
fn source_coord(o: usize, ratio: f64) -> f64 {
    (o as f64 + 0.5) * ratio - 0.5
}

pub(crate) fn resize_bilinear(plane: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    if (h, w) == (out_h, out_w) {
        return plane.to_owned();
    }
    let axis = |len: usize, out: usize| -> Vec<(usize, usize, f32)> {
        let ratio = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = source_coord(o, ratio).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = axis(h, out_h);
    let cols = axis(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, ty) = rows[y];
        let (x0, x1, tx) = cols[x];
        let top = plane[[y0, x0]] * (1.0 - tx) + plane[[y0, x1]] * tx;
        let bottom = plane[[y1, x0]] * (1.0 - tx) + plane[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

pub(crate) fn resize_nearest(labels: ArrayView2<LabelCode>, out_h: usize, out_w: usize) -> Array2<LabelCode> {
    let (h, w) = labels.dim();
    if (h, w) == (out_h, out_w) {
        return labels.to_owned();
    }
    let pick = |o: usize, len: usize, out: usize| (((o as f64 + 0.5) * len as f64 / out as f64).floor() as usize).min(len - 1);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| labels[[pick(y, h, out_h), pick(x, w, out_w)]])
}

/// Crops to `crop` and rescales by `scale`: bilinear for intensities,
/// nearest-neighbour for labels. Output size is `floor(crop · scale)`.
pub fn preprocess(sample: &MfishSample, crop: CropWindow, scale: f64) -> Result<MfishSample, IngestError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(IngestError::InvalidScale(scale));
    }
    let (h, w) = sample.dims();
    if !crop.fits(w, h) {
        return Err(IngestError::CropOutOfBounds {
            crop,
            width: w,
            height: h,
        });
    }
    let rows = crop.top..crop.top + crop.height;
    let cols = crop.left..crop.left + crop.width;
    let out_h = scaled_len(crop.height, scale);
    let out_w = scaled_len(crop.width, scale);
    let mut channels = Array3::zeros((sample.channels.len_of(Axis(0)), out_h, out_w));
    for (src, mut dst) in sample.channels.outer_iter().zip(channels.outer_iter_mut()) {
        let window = src.slice(s![rows.clone(), cols.clone()]);
        dst.assign(&resize_bilinear(window, out_h, out_w));
    }
    let labels = resize_nearest(sample.labels.slice(s![rows, cols]), out_h, out_w);
    Ok(MfishSample {
        id: sample.id.clone(),
        channels,
        labels,
        probe_set: sample.probe_set,
    })
}
