//! Procedural images: a class-coloured shape on a noisy gradient background,
//! with a matching segmentation mask.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Image, ImageSource, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::stream;

/// Unit-variance Gaussian pixels, already in model (normalized) space.
pub fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = stream(seed, "synthetic/random_image", 0);
    let data = (0..3 * size * size)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Image::new(size, size, data).expect("buffer sized for image")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub count: usize,
    pub image_size: usize,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Square,
    Disk,
    Cross,
}

fn palette(class: usize) -> [f32; 3] {
    // Spread hues around the colour wheel.
    let h = (class as f32 * 0.618_034).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

impl SyntheticDataset {
    pub fn new(count: usize, image_size: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 || classes > 254 {
            return Err(Error::Config(format!(
                "synthetic class count must be in 1..=254, got {classes}"
            )));
        }
        if image_size < 4 {
            return Err(Error::Config("synthetic images must be at least 4 pixels".into()));
        }
        Ok(Self {
            count,
            image_size,
            classes,
            seed,
        })
    }

    pub fn class_of(&self, index: usize) -> usize {
        index % self.classes
    }

    /// Image and mask; mask value `class + 1` marks the object, 0 background.
    pub fn sample(&self, index: usize) -> Result<(Image, LabelMap)> {
        if index >= self.count {
            return Err(Error::Range {
                what: "image",
                index,
                limit: self.count,
            });
        }
        let s = self.image_size;
        let class = self.class_of(index);
        let mut rng = stream(self.seed, "synthetic/image", index as u64);
        let bg_a: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.5));
        let bg_b: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.5));
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (ca, sa) = (angle.cos(), angle.sin());
        let shape = match class % 3 {
            0 => Shape::Square,
            1 => Shape::Disk,
            _ => Shape::Cross,
        };
        let half = rng.random_range(0.18..0.3) * s as f32;
        let cx = rng.random_range(half..s as f32 - half);
        let cy = rng.random_range(half..s as f32 - half);
        let color = palette(class);

        let mut img = Image::filled(s, s, [0.0; 3]);
        let mut labels = vec![0u8; s * s];
        for y in 0..s {
            for x in 0..s {
                let px = x as f32 + 0.5;
                let py = y as f32 + 0.5;
                let t = ((px / s as f32 - 0.5) * ca + (py / s as f32 - 0.5) * sa + 0.5).clamp(0.0, 1.0);
                let dx = (px - cx).abs();
                let dy = (py - cy).abs();
                let inside = match shape {
                    Shape::Square => dx <= half && dy <= half,
                    Shape::Disk => dx * dx + dy * dy <= half * half,
                    Shape::Cross => (dx <= half && dy <= half / 3.0) || (dy <= half && dx <= half / 3.0),
                };
                for c in 0..3 {
                    let noise: f32 = rng.random_range(-0.04..0.04);
                    let base = if inside {
                        color[c]
                    } else {
                        bg_a[c] * (1.0 - t) + bg_b[c] * t
                    };
                    img.set(c, y, x, (base + noise).clamp(0.0, 1.0));
                }
                if inside {
                    labels[y * s + x] = class as u8 + 1;
                }
            }
        }
        Ok((
            img,
            LabelMap {
                width: s,
                height: s,
                labels,
            },
        ))
    }
}

impl ImageSource for SyntheticDataset {
    fn id(&self) -> String {
        format!(
            "synthetic:n{}:s{}:k{}:seed{}",
            self.count, self.image_size, self.classes, self.seed
        )
    }

    fn len(&self) -> usize {
        self.count
    }

    fn load(&self, index: usize) -> Result<Image> {
        self.sample(index).map(|(img, _)| img)
    }

    fn label(&self, index: usize) -> Option<usize> {
        (index < self.count).then(|| self.class_of(index))
    }

    fn mask(&self, index: usize) -> Result<Option<LabelMap>> {
        self.sample(index).map(|(_, m)| Some(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let ds = SyntheticDataset::new(6, 16, 3, 1).unwrap();
        let (a, ma) = ds.sample(4).unwrap();
        let (b, mb) = ds.sample(4).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(ma.labels.iter().all(|&l| l == 0 || l as usize == ds.class_of(4) + 1));
        assert!(ma.labels.iter().any(|&l| l != 0));
        assert!(ds.sample(6).is_err());
    }

    #[test]
    fn labels_cycle_through_classes() {
        let ds = SyntheticDataset::new(7, 8, 3, 0).unwrap();
        let labels: Vec<_> = (0..7).map(|i| ds.label(i).unwrap()).collect();
        assert_eq!(labels, vec![0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn random_image_is_seeded() {
        assert_eq!(random_image(8, 3), random_image(8, 3));
        assert_ne!(random_image(8, 3), random_image(8, 4));
    }
}
