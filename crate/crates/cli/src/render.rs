//! PNG rendering: labelled heatmaps and segmentation overlays.

use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgba, RgbaImage};
use mfish_core::ingest::{LabelCode, LabelCoding};
use ndarray::{Array2, ArrayView2};

use crate::{CliError, Result};

/// Overlay colours for class indices 0..24 (chromosomes 1–22, X, Y).
pub const PALETTE: [[u8; 3]; 24] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 99, 71],
    [46, 139, 87],
    [106, 90, 205],
    [184, 134, 11],
];

/// Overlap pixels: stripes of these two colours.
pub const HATCH: [[u8; 3]; 2] = [[255, 255, 255], [40, 40, 40]];

const TRANSPARENT: Rgba<u8> = Rgba([0, 0, 0, 0]);
const WHITE: Rgba<u8> = Rgba([255, 255, 255, 255]);
const BLACK: Rgba<u8> = Rgba([0, 0, 0, 255]);

fn opaque([r, g, b]: [u8; 3]) -> Rgba<u8> {
    Rgba([r, g, b, 255])
}

/// Colour of one label pixel at (x, y).
pub fn label_color(code: LabelCode, x: u32, y: u32, coding: &LabelCoding) -> Rgba<u8> {
    if code == coding.overlap_code {
        return opaque(HATCH[((x + y) / 2 % 2) as usize]);
    }
    match coding.class_index(code) {
        Some(k) => opaque(PALETTE[k % PALETTE.len()]),
        None => TRANSPARENT,
    }
}

/// Sequential dark-blue → teal → yellow map on [0, 1].
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    std::array::from_fn(|c| (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8)
}

pub const GLYPH: u32 = 8;

/// Draws `text` with its top-left corner at (x, y); pixels off the image are
/// skipped.
pub fn draw_text(img: &mut RgbaImage, x: i64, y: i64, text: &str, color: Rgba<u8>) {
    for (n, ch) in text.chars().enumerate() {
        let Some(glyph) = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')) else {
            continue;
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) == 0 {
                    continue;
                }
                let (px, py) = (x + (n as i64) * GLYPH as i64 + col, y + row as i64);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
}

/// Pixel geometry of a heatmap: `cell`-sized squares offset by label margins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeatmapLayout {
    pub rows: usize,
    pub cols: usize,
    pub cell: u32,
    pub left: u32,
    pub top: u32,
}

impl HeatmapLayout {
    pub fn new(rows: usize, cols: usize, row_labels: &[String], col_labels: &[String]) -> Self {
        let longest = |l: &[String]| l.iter().map(|s| s.chars().count()).max().unwrap_or(0) as u32;
        Self {
            rows,
            cols,
            cell: 24,
            left: longest(row_labels) * GLYPH + 8,
            // column labels are written vertically, one glyph per line
            top: longest(col_labels) * GLYPH + 8,
        }
    }

    pub fn width(&self) -> u32 {
        self.left + self.cols as u32 * self.cell + 4
    }

    pub fn height(&self) -> u32 {
        self.top + self.rows as u32 * self.cell + 4
    }

    /// Centre pixel of cell (i, j).
    pub fn cell_center(&self, i: usize, j: usize) -> (u32, u32) {
        (
            self.left + j as u32 * self.cell + self.cell / 2,
            self.top + i as u32 * self.cell + self.cell / 2,
        )
    }
}

/// Heatmap of `values` mapped linearly from `[lo, hi]`, rows labelled on the
/// left and columns along the top.
pub fn heatmap(values: ArrayView2<f64>, row_labels: &[String], col_labels: &[String], lo: f64, hi: f64) -> RgbaImage {
    let (rows, cols) = values.dim();
    let layout = HeatmapLayout::new(rows, cols, row_labels, col_labels);
    let mut img = RgbaImage::from_pixel(layout.width(), layout.height(), WHITE);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for ((i, j), &v) in values.indexed_iter() {
        let color = opaque(colormap((v - lo) / span));
        let (x0, y0) = (layout.left + j as u32 * layout.cell, layout.top + i as u32 * layout.cell);
        for y in y0..y0 + layout.cell {
            for x in x0..x0 + layout.cell {
                img.put_pixel(x, y, color);
            }
        }
    }
    for (i, label) in row_labels.iter().enumerate().take(rows) {
        let y = layout.top + i as u32 * layout.cell + (layout.cell - GLYPH) / 2;
        draw_text(&mut img, 2, y as i64, label, BLACK);
    }
    for (j, label) in col_labels.iter().enumerate().take(cols) {
        let x = layout.left + j as u32 * layout.cell + (layout.cell - GLYPH) / 2;
        for (k, ch) in label.chars().enumerate() {
            draw_text(&mut img, x as i64, 2 + (k as u32 * GLYPH) as i64, &ch.to_string(), BLACK);
        }
    }
    img
}

/// Ground truth (left) and prediction (right) side by side. Prediction is
/// shown only where the ground truth is foreground; background stays
/// transparent and overlap pixels are hatched.
pub fn overlay(truth: ArrayView2<LabelCode>, pred: ArrayView2<LabelCode>, coding: &LabelCoding) -> RgbaImage {
    const GAP: u32 = 4;
    let (h, w) = truth.dim();
    let (h32, w32) = (h as u32, w as u32);
    let mut img = RgbaImage::from_pixel(2 * w32 + GAP, h32, TRANSPARENT);
    for ((y, x), &t) in truth.indexed_iter() {
        let (xu, yu) = (x as u32, y as u32);
        img.put_pixel(xu, yu, label_color(t, xu, yu, coding));
        let shown = if t == coding.background_code {
            t
        } else if t == coding.overlap_code {
            coding.overlap_code
        } else {
            pred[[y, x]]
        };
        img.put_pixel(w32 + GAP + xu, yu, label_color(shown, xu, yu, coding));
    }
    img
}

/// Row-normalised copy of a count matrix (empty rows stay zero).
pub fn row_normalise(counts: &Array2<u64>) -> Array2<f64> {
    let mut out = counts.mapv(|c| c as f64);
    for mut row in out.rows_mut() {
        let total: f64 = row.sum();
        if total > 0.0 {
            row /= total;
        }
    }
    out
}

pub fn save_png(img: &RgbaImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn palette_is_distinct() {
        let set: std::collections::BTreeSet<_> = PALETTE.iter().collect();
        assert_eq!(set.len(), 24);
        assert!(!PALETTE.contains(&HATCH[0]) && !PALETTE.contains(&HATCH[1]));
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
        assert_eq!(colormap(-3.0), colormap(0.0));
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }

    #[test]
    fn heatmap_cells_carry_their_values() {
        let v = array![[0.0, 0.25], [0.5, 1.0]];
        let labels = vec!["S001".to_string(), "S002".to_string()];
        let img = heatmap(v.view(), &labels, &labels, 0.0, 1.0);
        let layout = HeatmapLayout::new(2, 2, &labels, &labels);
        assert_eq!((img.width(), img.height()), (layout.width(), layout.height()));
        for ((i, j), &x) in v.indexed_iter() {
            let (cx, cy) = layout.cell_center(i, j);
            assert_eq!(*img.get_pixel(cx, cy), opaque(colormap(x)));
        }
        // labels leave ink in the margins
        assert!((0..layout.left).any(|x| *img.get_pixel(x, layout.top + 10) == BLACK));
    }

    #[test]
    fn overlay_colours() {
        let coding = LabelCoding::default();
        let truth = array![[0, 1, 255], [24, 2, 0]];
        let pred = array![[5, 2, 3], [24, 2, 7]];
        let img = overlay(truth.view(), pred.view(), &coding);
        assert_eq!((img.width(), img.height()), (3 * 2 + 4, 2));
        assert_eq!(img.get_pixel(0, 0)[3], 0);
        assert_eq!(*img.get_pixel(1, 0), opaque(PALETTE[0]));
        assert_eq!(*img.get_pixel(0, 1), opaque(PALETTE[23]));
        // prediction panel: class 2 predicted where truth is 1, background kept clear
        assert_eq!(*img.get_pixel(3 + 4 + 1, 0), opaque(PALETTE[1]));
        assert_eq!(img.get_pixel(3 + 4, 0)[3], 0);
        assert!(HATCH.iter().any(|&c| *img.get_pixel(3 + 4 + 2, 0) == opaque(c)));
    }
}
