use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Three-channel image stored channel-major (`c, y, x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * width * height {
            return Err(Error::Contract(format!(
                "image buffer of {} values for {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, width * height));
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at `i + 0.5`),
    /// with edge clamping.
    pub fn sample_bilinear(&self, c: usize, y: f32, x: f32) -> f32 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f32);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f32);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f32;
        let ay = fy - y0 as f32;
        let top = self.at(c, y0, x0) * (1.0 - ax) + self.at(c, y0, x1) * ax;
        let bottom = self.at(c, y1, x0) * (1.0 - ax) + self.at(c, y1, x1) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let mut out = Image::filled(width, height, [0.0; 3]);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let v = self.sample_bilinear(c, (y as f32 + 0.5) * sy, (x as f32 + 0.5) * sx);
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }

    /// Per-channel `(v - mean) / std` with ImageNet statistics.
    pub fn normalized(&self) -> Image {
        let plane = self.width * self.height;
        let mut data = self.data.clone();
        for (c, chunk) in data.chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Loads an RGB image scaled to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = Image::filled(w, h, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c]);
            }
        }
        Ok(out)
    }
}

/// Integer label map (e.g. segmentation mask).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Nearest-neighbour resampling with the `floor(dst * in / out)` source index.
    pub fn resize_nearest(&self, width: usize, height: usize) -> LabelMap {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                labels.push(self.at(sy, sx));
            }
        }
        LabelMap {
            width,
            height,
            labels,
        }
    }

    pub fn load(path: &Path) -> Result<LabelMap> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(LabelMap {
            width: w as usize,
            height: h as usize,
            labels: img.into_raw(),
        })
    }
}
