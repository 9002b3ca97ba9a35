//! Random resized crops with optional flip and brightness/contrast jitter.
//! Every view records its exact transform so geometry can be recomputed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source area.
    pub scale: [f64; 2],
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio: [f64; 2],
    pub flip_prob: f64,
    /// Maximum relative brightness change.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: [0.5, 1.0],
            ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale: [1.0, 1.0],
            ratio: [1.0, 1.0],
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.scale[0]
            && self.scale[0] <= self.scale[1]
            && self.scale[1] <= 1.0
            && 0.0 < self.ratio[0]
            && self.ratio[0] <= self.ratio[1]
            && (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..1.0).contains(&self.brightness)
            && (0.0..1.0).contains(&self.contrast);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation {self:?}")))
        }
    }

    /// Draws a view of a `width × height` source rendered at `out_size²`.
    pub fn sample_view<R: Rng + ?Sized>(
        &self,
        width: usize,
        height: usize,
        out_size: usize,
        rng: &mut R,
    ) -> ViewTransform {
        let (w, h) = (width as f64, height as f64);
        let area = w * h;
        let (lr0, lr1) = (self.ratio[0].ln(), self.ratio[1].ln());
        let mut crop = None;
        for _ in 0..10 {
            let target = area * uniform(rng, self.scale[0], self.scale[1]);
            let ratio = uniform(rng, lr0, lr1).exp();
            let cw = (target * ratio).sqrt();
            let ch = (target / ratio).sqrt();
            if cw <= w && ch <= h {
                let x = uniform(rng, 0.0, w - cw);
                let y = uniform(rng, 0.0, h - ch);
                crop = Some([x, y, cw, ch]);
                break;
            }
        }
        // Fallback: the largest central crop within the ratio bounds.
        let crop = crop.unwrap_or_else(|| {
            let r = (w / h).clamp(self.ratio[0], self.ratio[1]);
            let (cw, ch) = if w / h > r { (h * r, h) } else { (w, w / r) };
            [(w - cw) / 2.0, (h - ch) / 2.0, cw, ch]
        });
        let flip = self.flip_prob > 0.0 && rng.random_bool(self.flip_prob);
        let brightness = 1.0 + uniform(rng, -self.brightness, self.brightness);
        let contrast = 1.0 + uniform(rng, -self.contrast, self.contrast);
        ViewTransform {
            source_width: width,
            source_height: height,
            crop,
            flip,
            out_size,
            brightness,
            contrast,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Crop `[x, y, w, h]` in source pixels, resized to `out_size²`, then
/// optionally mirrored horizontally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub source_width: usize,
    pub source_height: usize,
    pub crop: [f64; 4],
    pub flip: bool,
    pub out_size: usize,
    pub brightness: f64,
    pub contrast: f64,
}

impl ViewTransform {
    pub fn identity(width: usize, height: usize, out_size: usize) -> Self {
        Self {
            source_width: width,
            source_height: height,
            crop: [0.0, 0.0, width as f64, height as f64],
            flip: false,
            out_size,
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    pub fn source_to_view(&self, x: f64, y: f64) -> (f64, f64) {
        let [cx, cy, cw, ch] = self.crop;
        let s = self.out_size as f64;
        let mut u = (x - cx) * s / cw;
        let v = (y - cy) * s / ch;
        if self.flip {
            u = s - u;
        }
        (u, v)
    }

    pub fn view_to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let [cx, cy, cw, ch] = self.crop;
        let s = self.out_size as f64;
        let u = if self.flip { s - u } else { u };
        (cx + u * cw / s, cy + v * ch / s)
    }

    pub fn contains_view_point(&self, u: f64, v: f64) -> bool {
        let s = self.out_size as f64;
        (0.0..s).contains(&u) && (0.0..s).contains(&v)
    }

    /// Area of the intersection of two crops in source pixels.
    pub fn overlap_area(&self, other: &ViewTransform) -> f64 {
        let [ax, ay, aw, ah] = self.crop;
        let [bx, by, bw, bh] = other.crop;
        let w = (ax + aw).min(bx + bw) - ax.max(bx);
        let h = (ay + ah).min(by + bh) - ay.max(by);
        w.max(0.0) * h.max(0.0)
    }

    pub fn render(&self, source: &Image) -> Result<Image> {
        if source.width != self.source_width || source.height != self.source_height {
            return Err(Error::Contract(format!(
                "view expects a {}x{} source, got {}x{}",
                self.source_width, self.source_height, source.width, source.height
            )));
        }
        let s = self.out_size;
        let mut out = Image::filled(s, s, [0.0; 3]);
        let plane_mean: Vec<f64> = source
            .data
            .chunks_exact(source.width * source.height)
            .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64)
            .collect();
        for y in 0..s {
            for x in 0..s {
                let (sx, sy) = self.view_to_source(x as f64 + 0.5, y as f64 + 0.5);
                for c in 0..3 {
                    let v = source.sample_bilinear(c, sy as f32, sx as f32) as f64;
                    let v = (v - plane_mean[c]) * self.contrast + plane_mean[c];
                    out.set(c, y, x, (v * self.brightness).clamp(0.0, 1.0) as f32);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::stream;
    use proptest::prelude::*;

    #[test]
    fn identity_config_gives_identity_view() {
        let mut rng = stream(0, "t", 0);
        let v = AugmentConfig::identity().sample_view(20, 20, 20, &mut rng);
        assert_eq!(v, ViewTransform::identity(20, 20, 20));
    }

    #[test]
    fn identity_render_of_square_is_copy() {
        let mut img = Image::filled(5, 5, [0.0; 3]);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        let out = ViewTransform::identity(5, 5, 5).render(&img).unwrap();
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn sampled_crops_fit_and_invert(seed in 0u64..500, w in 8usize..64, h in 8usize..64) {
            let mut rng = stream(seed, "t", 0);
            let v = AugmentConfig::default().sample_view(w, h, 16, &mut rng);
            let [x, y, cw, ch] = v.crop;
            prop_assert!(x >= 0.0 && y >= 0.0 && cw > 0.0 && ch > 0.0);
            prop_assert!(x + cw <= w as f64 + 1e-9 && y + ch <= h as f64 + 1e-9);
            let (u, t) = v.source_to_view(x + 0.3 * cw, y + 0.7 * ch);
            let (sx, sy) = v.view_to_source(u, t);
            prop_assert!((sx - (x + 0.3 * cw)).abs() < 1e-9);
            prop_assert!((sy - (y + 0.7 * ch)).abs() < 1e-9);
        }
    }
}
