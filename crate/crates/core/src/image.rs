//! RGB frames stored planar (`3×H×W`) and PNG input/output.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// `data` is planar: all red values, then green, then blue.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0,
            InvalidArgument,
            "empty image {height}x{width}"
        );
        ensure!(
            data.len() == 3 * height * width,
            ShapeMismatch,
            "{}x{} image needs {} values, got {}",
            height,
            width,
            3 * height * width,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "image values must be finite"
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        ensure!(
            t.shape().len() == 3 && t.shape()[0] == 3,
            ShapeMismatch,
            "expected a 3xHxW tensor, got {:?}",
            t.shape()
        );
        Self::new(t.shape()[1], t.shape()[2], t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![3, self.height, self.width], self.data.clone())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// BT.601 luma, row-major `H×W`.
    pub fn grayscale(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                LUMA_WEIGHTS[0] * self.data[i]
                    + LUMA_WEIGHTS[1] * self.data[n + i]
                    + LUMA_WEIGHTS[2] * self.data[2 * n + i]
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        }))
    }

    /// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let px =
                    |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([px(0), px(1), px(2)])
            });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Writes a row-major `H×W` map in `[0, 1]` as a 16-bit grayscale PNG.
pub fn save_gray16(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    values: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    ensure!(values.len() == height * width, ShapeMismatch, "map size");
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            let v = values[y as usize * width + x as usize].clamp(0.0, 1.0);
            Luma([(v * 65535.0).round() as u16])
        });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_weights_sum_to_one() {
        assert!((LUMA_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let img = Image::filled(2, 2, 0.37);
        for v in img.grayscale() {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, |c, y, x| {
            ((c * 31 + y * 7 + x * 3) % 256) as f64 / 255.0
        });
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
    }
}
