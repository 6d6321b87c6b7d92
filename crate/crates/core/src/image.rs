//! Minimal float RGB raster.
//!
//! Coordinates are continuous: pixel `(i, j)` covers `[i, i+1) x [j, j+1)`
//! and its center sits at `(i + 0.5, j + 0.5)`.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major HWC RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&value);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image::filled(width, height, [0.0; 3])
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x3 image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at a continuous coordinate; outside pixels read as black.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let u = x - 0.5;
        let v = y - 0.5;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = (u - x0) as f32;
        let fy = (v - y0) as f32;
        let mut out = [0.0f32; 3];
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let xi = x0 as i64 + dx;
                let yi = y0 as i64 + dy;
                if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                    continue;
                }
                let p = self.pixel(xi as usize, yi as usize);
                for c in 0..3 {
                    out[c] += w * p[c];
                }
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = self.offset(x0, y);
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    /// Writes `patch` with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, patch: &Image, x0: usize, y0: usize) -> Result<()> {
        if x0 + patch.width > self.width || y0 + patch.height > self.height {
            return Err(Error::Shape("paste exceeds image bounds".into()));
        }
        for y in 0..patch.height {
            let dst = self.offset(x0, y0 + y);
            let src = patch.offset(0, y);
            self.data[dst..dst + patch.width * 3]
                .copy_from_slice(&patch.data[src..src + patch.width * 3]);
        }
        Ok(())
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, width: usize, height: usize, rgb: [f32; 3]) {
        for y in y0..(y0 + height).min(self.height) {
            for x in x0..(x0 + width).min(self.width) {
                self.set_pixel(x, y, rgb);
            }
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// CHW planar copy, the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, chw: &[f32]) -> Result<Image> {
        let plane = width * height;
        if chw.len() != plane * 3 {
            return Err(Error::Shape("CHW buffer length mismatch".into()));
        }
        let mut data = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                data[i * 3 + c] = chw[c * plane + i];
            }
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }
}
