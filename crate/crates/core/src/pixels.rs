//! Float image buffers and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::ImageIoError;

/// Row-major, channel-interleaved `f64` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageIoError> {
        if data.len() != width * height * channels {
            return Err(ImageIoError::Shape(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    #[inline]
    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn same_shape(&self, other: &ImageF) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn flip_horizontal(&self) -> ImageF {
        let mut out = ImageF::new(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(self.width - 1 - x, y, c, self.get(x, y, c));
                }
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &ImageF) -> f64 {
        assert!(self.same_shape(other));
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        s / self.data.len().max(1) as f64
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage, ImageIoError> {
    image::open(path).map_err(|source| ImageIoError::Decode { path: path.to_path_buf(), source })
}

/// Reads an 8- or 16-bit PNG as linear RGB in `[0, 1]`.
pub fn read_color_png(path: &Path) -> Result<ImageF, ImageIoError> {
    let img = decode(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| srgb_to_linear(v as f64 / 65535.0)).collect();
    ImageF::from_data(w as usize, h as usize, 3, data)
}

/// Linear RGB to 8-bit sRGB.
pub fn color_to_srgb8(img: &ImageF) -> Vec<u8> {
    img.data.iter().map(|&v| (linear_to_srgb(v) * 255.0).round() as u8).collect()
}

pub fn write_color_png(path: &Path, img: &ImageF) -> Result<(), ImageIoError> {
    if img.channels != 3 {
        return Err(ImageIoError::Shape(format!("color image with {} channels", img.channels)));
    }
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, color_to_srgb8(img))
            .expect("buffer size matches dimensions");
    buf.save(path).map_err(|source| ImageIoError::Encode { path: path.to_path_buf(), source })
}

/// Reads a mask PNG; any pixel above half intensity is on.
pub fn read_mask_png(path: &Path) -> Result<ImageF, ImageIoError> {
    let img = decode(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| if v > 32767 { 1.0 } else { 0.0 }).collect();
    ImageF::from_data(w as usize, h as usize, 1, data)
}

/// Writes a single-channel image in `[0, 1]` as 8-bit grayscale.
pub fn write_gray_png(path: &Path, img: &ImageF) -> Result<(), ImageIoError> {
    if img.channels != 1 {
        return Err(ImageIoError::Shape(format!("gray image with {} channels", img.channels)));
    }
    let raw: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size matches dimensions");
    buf.save(path).map_err(|source| ImageIoError::Encode { path: path.to_path_buf(), source })
}

/// Raw 16-bit depth image.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRaw {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

pub fn read_depth_png(path: &Path) -> Result<DepthRaw, ImageIoError> {
    let img = decode(path)?;
    let found = format!("{:?}", img.color());
    let luma = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        _ => {
            return Err(ImageIoError::Format {
                path: path.to_path_buf(),
                expected: "16-bit grayscale",
                found,
            })
        }
    };
    let (w, h) = luma.dimensions();
    Ok(DepthRaw { width: w as usize, height: h as usize, data: luma.into_raw() })
}

/// Encodes metric depth as 16-bit units of `scale` meters (0 stays 0).
pub fn encode_depth(depth: &ImageF, scale: f64) -> DepthRaw {
    let data = depth
        .data
        .iter()
        .map(|&d| if d > 0.0 { (d / scale).round().clamp(1.0, 65535.0) as u16 } else { 0 })
        .collect();
    DepthRaw { width: depth.width, height: depth.height, data }
}

pub fn write_depth_png(path: &Path, raw: &DepthRaw) -> Result<(), ImageIoError> {
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(raw.width as u32, raw.height as u32, raw.data.clone())
            .expect("buffer size matches dimensions");
    buf.save(path).map_err(|source| ImageIoError::Encode { path: path.to_path_buf(), source })
}
