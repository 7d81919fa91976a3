use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use super::{IngestError, LabelCode};

fn open(path: &Path) -> Result<DynamicImage, IngestError> {
    if !path.is_file() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| IngestError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a single-channel 8- or 16-bit raster, dividing by the format's
/// maximum value.
pub fn read_gray(path: &Path) -> Result<Array2<f32>, IngestError> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32)[0] as f32 / u8::MAX as f32
            }))
        }
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32)[0] as f32 / u16::MAX as f32
            }))
        }
        _ => Err(IngestError::NotSingleChannel(path.to_path_buf())),
    }
}

pub fn read_labels(path: &Path) -> Result<Array2<LabelCode>, IngestError> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32)[0] as LabelCode
            }))
        }
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                img.get_pixel(x as u32, y as u32)[0]
            }))
        }
        _ => Err(IngestError::NotSingleChannel(path.to_path_buf())),
    }
}

/// Writes intensities in [0, 1] as a 16-bit grayscale raster.
pub fn write_gray16(path: &Path, values: &Array2<f32>) -> Result<(), IngestError> {
    let (h, w) = values.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = values[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * u16::MAX as f32).round() as u16])
    });
    img.save(path).map_err(|source| IngestError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a label map as 8-bit when every code fits, else 16-bit.
pub fn write_labels(path: &Path, labels: &Array2<LabelCode>) -> Result<(), IngestError> {
    let (h, w) = labels.dim();
    let result = if labels.iter().all(|&c| c <= u8::MAX as u16) {
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([labels[[y as usize, x as usize]] as u8]));
        img.save(path)
    } else {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([labels[[y as usize, x as usize]]]));
        img.save(path)
    };
    result.map_err(|source| IngestError::Write {
        path: path.to_path_buf(),
        source,
    })
}
