//! Image and mask containers, PNG I/O and canonical resizing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Working side length every pipeline stage assumes after ingestion.
pub const CANONICAL_SIDE: usize = 256;

/// Row-major, channel-interleaved floating image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant image filled with `value` in every channel.
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("constant image is valid")
    }

    /// Builds an RGB image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// RGB view of pixel `(row, col)`; single-channel images are replicated.
    #[inline]
    pub fn rgb(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * self.channels;
        if self.channels == 3 {
            [self.data[i], self.data[i + 1], self.data[i + 2]]
        } else {
            let v = self.data[i];
            [v, v, v]
        }
    }

    /// Copies the `height`×`width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in row..row + height {
            let start = (r * self.width + col) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Self {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Expands a grayscale image to three identical channels.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Per-channel mean (RGB order).
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sum = [0.0f64; 3];
        for r in 0..self.height {
            for c in 0..self.width {
                let px = self.rgb(r, c);
                for k in 0..3 {
                    sum[k] += px[k] as f64;
                }
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        sum.map(|s| s / n)
    }
}

/// Binary foreground mask (1 = object).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("mask data length does not match dimensions"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    /// Nearest-neighbour resample; masks stay binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |r, c| {
            let sr = (((r as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            let sc = (((c as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
            self.is_foreground(sr, sc)
        })
    }
}

struct DecodedPng {
    height: usize,
    width: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn decode_png(path: &Path) -> Result<DecodedPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(decode_err(format!("unsupported color type {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| decode_err("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    if buf.len() != width * height * channels {
        return Err(decode_err("unexpected frame size".into()));
    }
    Ok(DecodedPng {
        height,
        width,
        channels,
        bytes: buf,
    })
}

/// Loads an 8-bit RGB or grayscale PNG as a 3-channel image in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let png = decode_png(path.as_ref())?;
    let data = png.bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(ImageTensor::new(png.height, png.width, png.channels, data)?.to_rgb())
}

/// Loads a mask PNG; any nonzero byte in the first channel marks foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<SegMask> {
    let png = decode_png(path.as_ref())?;
    let data = png
        .bytes
        .chunks_exact(png.channels)
        .map(|px| (px[0] > 0) as u8)
        .collect();
    SegMask::new(png.height, png.width, data)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

#[inline]
pub(crate) fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an image as 8-bit PNG (RGB or grayscale according to its channels).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    let color = if img.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    };
    write_png(path.as_ref(), img.width, img.height, color, &bytes)
}

/// Writes a mask as 8-bit grayscale PNG (0 / 255).
pub fn save_mask(mask: &SegMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    write_png(path.as_ref(), mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}

/// Writes a grid of scores in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray(values: &[f32], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, &bytes)
}

/// Bilinear resize to `side`×`side`, pixel centres at `(i + 0.5) / n`.
pub fn resize_canonical(img: &ImageTensor, side: usize) -> Result<ImageTensor> {
    if side == 0 {
        return Err(Error::invalid("resize side must be at least 1"));
    }
    if img.height == side && img.width == side {
        return Ok(img.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let rows = axis(img.height, side);
    let cols = axis(img.width, side);
    let ch = img.channels;
    let mut data = Vec::with_capacity(side * side * ch);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            for k in 0..ch {
                let top = img.get(r0, c0, k) * (1.0 - fx) + img.get(r0, c1, k) * fx;
                let bottom = img.get(r1, c0, k) * (1.0 - fx) + img.get(r1, c1, k) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(side, side, ch, data)
}
