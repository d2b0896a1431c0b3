//! RGB images in `[-1, 1]` and their 8-bit PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Channel-major (3×H×W) RGB image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// 8-bit value to `[-1, 1]`: 0 → −1, 255 → +1.
pub fn byte_to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`] with rounding and clamping.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Image(format!(
                "{} values do not form a 3x{height}x{width} image",
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c.clamp(-1.0, 1.0), height * width));
        }
        ImageTensor { height, width, data }
    }

    /// Interleaved RGB8 bytes, row-major.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::Image(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = byte_to_unit(px[c]);
            }
        }
        ImageTensor::new(height, width, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(unit_to_byte(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(-1.0, 1.0);
    }

    /// Columns `x0..x0+w` as a new image.
    pub fn crop_columns(&self, x0: usize, w: usize) -> Result<Self> {
        if x0 + w > self.width || w == 0 {
            return Err(Error::Image(format!("column window {x0}+{w} outside width {}", self.width)));
        }
        let mut data = Vec::with_capacity(3 * self.height * w);
        for c in 0..3 {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        ImageTensor::new(self.height, w, data)
    }

    /// Writes `other` into this image with its left edge at column `x0`.
    pub fn paste_columns(&mut self, other: &ImageTensor, x0: usize) -> Result<()> {
        if other.height != self.height || x0 + other.width > self.width {
            return Err(Error::Image("paste window does not fit".into()));
        }
        for c in 0..3 {
            for y in 0..self.height {
                let dst = (c * self.height + y) * self.width + x0;
                let src = (c * other.height + y) * other.width;
                self.data[dst..dst + other.width].copy_from_slice(&other.data[src..src + other.width]);
            }
        }
        Ok(())
    }

    /// Images of equal height placed side by side.
    pub fn tile_horizontal(images: &[ImageTensor]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Image("nothing to tile".into()))?;
        let h = first.height;
        if images.iter().any(|im| im.height != h) {
            return Err(Error::Image("tiled images must share a height".into()));
        }
        let total: usize = images.iter().map(|im| im.width).sum();
        let mut out = ImageTensor::filled(h, total, [0.0; 3]);
        let mut x = 0;
        for im in images {
            out.paste_columns(im, x)?;
            x += im.width;
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Image("size mismatch".into()));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        writer
            .finish()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Loads an 8-bit RGB, RGBA, grayscale or gray-alpha PNG; alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, rgb) = read_png_rgb8(path)?;
        ImageTensor::from_rgb8(h, w, &rgb)
    }
}

/// Decodes a PNG to `(width, height, interleaved RGB8)`.
/// Width and height from the PNG header, without decoding pixels.
pub fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

pub fn read_png_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let bad = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Image(format!("{}: unexpanded palette", path.display()))),
    };
    Ok((w, h, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_encoding_endpoints_and_round_trip() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        for p in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(p)), p);
        }
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..3 * 5 * 7).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImageTensor::from_rgb8(5, 7, &bytes).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_rgb8(), bytes);
    }
}
