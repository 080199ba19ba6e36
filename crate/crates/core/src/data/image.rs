//! PNG reading and writing.

use std::path::Path;

use image::{ImageBuffer, ImageReader, Luma, Rgb, Rgba};

use crate::error::{Error, Result};

/// Row-major image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray), 3 (RGB) or 4 (RGBA).
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if ![1, 3, 4].contains(&channels) {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{}×{}×{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<Self> {
        let data = rgb.iter().flat_map(|p| p.map(|v| v as f32)).collect();
        Self::new(width, height, 3, data)
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// RGB pixels with any alpha composited over `background`.
    pub fn to_rgb(&self, background: [f64; 3]) -> Vec<[f32; 3]> {
        (0..self.width * self.height)
            .map(|i| {
                let p = self.pixel(i);
                match self.channels {
                    1 => [p[0]; 3],
                    3 => [p[0], p[1], p[2]],
                    _ => {
                        let a = p[3];
                        [0, 1, 2].map(|c| p[c] * a + background[c] as f32 * (1.0 - a))
                    }
                }
            })
            .collect()
    }
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes an 8-bit PNG.
pub fn write_png8(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let px: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let res = match img.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, px).unwrap().save(path),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, px).unwrap().save(path),
        _ => ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, px).unwrap().save(path),
    };
    res.map_err(|e| image_err(path, e))
}

/// Writes a 16-bit PNG.
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let px: Vec<u16> = img.data.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let res = match img.channels {
        1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, px).unwrap().save(path),
        3 => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, px).unwrap().save(path),
        _ => ImageBuffer::<Rgba<u16>, _>::from_raw(w, h, px).unwrap().save(path),
    };
    res.map_err(|e| image_err(path, e))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// Reads an 8- or 16-bit PNG, normalizing to [0, 1]. Gray+alpha becomes RGBA.
pub fn read_png(path: &Path) -> Result<Image> {
    use image::DynamicImage as D;
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match img {
        D::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        D::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        D::ImageRgba8(b) => (4, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        D::ImageLumaA8(_) => (4, img.into_rgba8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        D::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        D::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        D::ImageRgba16(b) => (4, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        other => (4, other.into_rgba32f().into_raw()),
    };
    Image::new(w, h, channels, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes integer labels as an 8-bit single-channel PNG.
pub fn write_labels(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, labels.to_vec())
        .ok_or_else(|| Error::Shape("label buffer size does not match the image".into()))?
        .save(path)
        .map_err(|e| image_err(path, e))
}

/// Reads an 8-bit label PNG as `(width, height, labels)`.
pub fn read_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path)?;
    if !matches!(img, image::DynamicImage::ImageLuma8(_)) {
        return Err(Error::format(path, "label masks must be 8-bit single-channel"));
    }
    let b = img.into_luma8();
    Ok((b.width() as usize, b.height() as usize, b.into_raw()))
}
