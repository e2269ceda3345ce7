//! Netpbm I/O and CLIP-style normalization.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, GrayImage, ImageEncoder, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Per-channel mean of the normalization.
pub const CLIP_MEAN: [f64; 3] = [0.4815, 0.4578, 0.4082];
/// Per-channel standard deviation of the normalization.
pub const CLIP_STD: [f64; 3] = [0.2686, 0.2613, 0.2758];

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)
        .map_err(Error::at_path(path))?
        .with_guessed_format()
        .map_err(Error::at_path(path))?
        .decode()?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(Error::Format(format!(
            "{}: expected an RGB image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(Error::at_path(path))?;
    let enc = PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
    enc.write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(Error::at_path(path))?;
    let enc = PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let img = ImageReader::open(path)
        .map_err(Error::at_path(path))?
        .with_guessed_format()
        .map_err(Error::at_path(path))?
        .decode()?;
    match img {
        DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::Format(format!(
            "{}: expected a grayscale image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Resizes to `size x size`, optionally mirrors horizontally, scales to
/// [0, 1] and standardizes each channel. Returns `[3, size, size]`.
pub fn normalize_rgb(img: &RgbImage, size: usize, flip: bool) -> Vec<f64> {
    let resized;
    let src = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        resized = image::imageops::resize(
            img,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        );
        &resized
    };
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let sx = if flip { size - 1 - x } else { x };
            let p = src.get_pixel(sx as u32, y as u32);
            for c in 0..3 {
                out[(c * size + y) * size + x] = (p[c] as f64 / 255.0 - CLIP_MEAN[c]) / CLIP_STD[c];
            }
        }
    }
    out
}

/// [`normalize_rgb`] for a decoded image of unknown color type.
pub fn normalize_image(img: &DynamicImage, size: usize, flip: bool) -> Result<DenseTensor> {
    match img {
        DynamicImage::ImageRgb8(rgb) => {
            DenseTensor::new([3, size, size], normalize_rgb(rgb, size, flip))
        }
        other => Err(Error::Format(format!(
            "expected an RGB image, found {:?}",
            other.color()
        ))),
    }
}
