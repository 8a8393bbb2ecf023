//! Channel-first float images and their PNG / raw-float encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// C×H×W image with linear `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::config(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }

    /// Peak signal-to-noise ratio for values in [0, 1].
    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self.mse(other);
        if mse <= 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    /// Writes an 8-bit PNG (gray for 1 channel, RGB for 3), clamping to [0, 1].
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::config(format!("cannot write a {c}-channel PNG"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let n = self.width * self.height;
        let mut bytes = vec![0u8; n * self.channels];
        for i in 0..n {
            for c in 0..self.channels {
                let v = self.data[c * n + i].clamp(0.0, 1.0);
                bytes[i * self.channels + c] = (v * 255.0).round() as u8;
            }
        }
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }

    /// Reads an 8-bit gray/RGB/RGBA PNG into a 3-channel image (alpha dropped).
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let stride = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
        };
        let mut img = Image::new(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let px = &buf[y * info.line_size + x * stride..];
                for c in 0..3 {
                    let v = if stride < 3 { px[0] } else { px[c] };
                    img.set(c, y, x, v as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }

    /// Lossless dump: `FIMG`, then u32 channels/height/width, then f32 data (LE).
    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(16 + 4 * self.data.len());
        bytes.extend_from_slice(b"FIMG");
        for d in [self.channels, self.height, self.width] {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != b"FIMG" {
            return Err(Error::parse(path, 1, "missing FIMG header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let body = &bytes[16..];
        if body.len() != 4 * c * h * w {
            return Err(Error::parse(path, 1, "payload size does not match header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Image::from_data(c, h, w, data)
    }
}
