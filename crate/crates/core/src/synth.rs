//! Synthetic 16-class fixture: nucleus-like discs on a blotchy background.
//!
//! Classes `k` and `k + 8` share the disc color; the upper half carries a
//! stripe texture with a period of `native / 8` pixels (5 pixels after
//! resizing to 40). Color survives any blur, the texture fades past
//! sigma ~ 1, which gives the fixture a blur threshold.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datapipe::{Dataset, LabeledPatch, RgbImage};
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_CLASSES: usize = 16;
pub const DEFAULT_NATIVE: usize = 80;

/// Disc colors; each is used by one smooth and one textured class.
const PALETTE: [[f64; 3]; 8] = [
    [150.0, 40.0, 60.0],
    [60.0, 50.0, 150.0],
    [50.0, 130.0, 70.0],
    [170.0, 120.0, 40.0],
    [110.0, 40.0, 140.0],
    [40.0, 120.0, 140.0],
    [90.0, 90.0, 90.0],
    [180.0, 80.0, 130.0],
];
const BACKGROUND: [f64; 3] = [225.0, 205.0, 215.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Samples per class; the length sets the number of classes.
    pub counts: Vec<usize>,
    pub native_size: usize,
    /// 0 = clean; 1 = heavy noise, weak texture and color jitter.
    pub difficulty: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn balanced(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            counts: vec![per_class; classes],
            native_size: DEFAULT_NATIVE,
            difficulty: 0.3,
            seed,
        }
    }

    /// `total` samples spread as evenly as possible over `classes`.
    pub fn with_total(classes: usize, total: usize, seed: u64) -> Self {
        let counts = (0..classes).map(|c| total / classes + usize::from(c < total % classes)).collect();
        Self {
            counts,
            ..Self::balanced(classes, 0, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts.len() > MAX_CLASSES {
            return Err(Error::Config(format!(
                "synthetic generator supports 1..={MAX_CLASSES} classes, got {}",
                self.counts.len()
            )));
        }
        if self.native_size < 20 {
            return Err(Error::Config(format!("native size {} is too small", self.native_size)));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config(format!("difficulty must be in [0, 1], got {}", self.difficulty)));
        }
        Ok(())
    }
}

pub fn class_name(class: usize) -> String {
    let kind = if class >= 8 { "textured" } else { "smooth" };
    format!("{kind}{:02}", class % 8)
}

/// Ordering of classes used by the generator: smooth then textured.
pub fn class_order(classes: usize) -> Vec<usize> {
    // With fewer than 16 classes, alternate so both kinds are present.
    if classes == MAX_CLASSES {
        return (0..classes).collect();
    }
    (0..classes).map(|i| if i % 2 == 0 { i / 2 } else { 8 + i / 2 }).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let order = class_order(cfg.counts.len());
    let mut patches = Vec::with_capacity(cfg.counts.iter().sum());
    for (&class, &n) in order.iter().zip(&cfg.counts) {
        for i in 0..n {
            let mut r = rng::stream(cfg.seed, &[rng::SYNTH, class as u64, i as u64]);
            patches.push(LabeledPatch {
                image: render(class, cfg.native_size, cfg.difficulty, &mut r),
                flag: class_name(class),
                source_id: format!("synth-{class:02}-{i:06}"),
                tags: Vec::new(),
            });
        }
    }
    Ok(Dataset::from_patches(patches))
}

fn render(class: usize, size: usize, difficulty: f64, r: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let unit = s / 40.0;
    let jitter = 6.0 + 20.0 * difficulty;
    let noise = Normal::new(0.0, 1.0 + 6.0 * difficulty).expect("valid std");

    let bg: Vec<f64> = BACKGROUND.iter().map(|&v| v + r.random_range(-jitter..jitter)).collect();
    let fg: Vec<f64> = PALETTE[class % 8].iter().map(|&v| v + r.random_range(-jitter..jitter)).collect();
    // Broad background blobs.
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(0.0..s),
                r.random_range(0.0..s),
                r.random_range(6.0..14.0) * unit,
                r.random_range(-25.0..25.0),
            )
        })
        .collect();
    let (cx, cy) = (s / 2.0 + r.random_range(-4.0..4.0) * unit, s / 2.0 + r.random_range(-4.0..4.0) * unit);
    let radius = r.random_range(9.0..13.0) * unit;
    let textured = class >= 8;
    let period = 5.0 * unit;
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let vertical = r.random_bool(0.5);
    let amp = 55.0 * (1.0 - 0.5 * difficulty);

    RgbImage::from_fn(size, size, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let shade: f64 = blobs
            .iter()
            .map(|&(bx, by, br, a)| a * (-((px - bx).powi(2) + (py - by).powi(2)) / (2.0 * br * br)).exp())
            .sum();
        let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
        // Soft disc edge over about one resized pixel.
        let inside = 1.0 / (1.0 + ((d - radius) / (0.5 * unit)).exp());
        let tex = if textured {
            let t = if vertical { px } else { py };
            amp * (std::f64::consts::TAU * t / period + phase).sin()
        } else {
            0.0
        };
        let mut out = [0u8; 3];
        for c in 0..3 {
            let back = bg[c] + shade;
            let front = fg[c] + tex;
            let v = back + inside * (front - back) + noise.sample(r);
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig::balanced(16, 3, 9);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.len(), 48);
        assert_eq!(a.num_classes(), 16);
        assert!(a.patches.iter().all(|p| p.image.width() == DEFAULT_NATIVE));
        let c = generate(&SynthConfig::balanced(16, 3, 10)).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn small_class_counts_mix_both_kinds() {
        let order = class_order(4);
        assert_eq!(order, vec![0, 8, 1, 9]);
        let ds = generate(&SynthConfig::with_total(4, 10, 1)).unwrap();
        // Keys sort as smooth00, smooth01, textured00, textured01.
        assert_eq!(ds.counts().values().copied().collect::<Vec<_>>(), vec![3, 2, 3, 2]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig::balanced(17, 1, 0)).is_err());
        let mut c = SynthConfig::balanced(2, 1, 0);
        c.difficulty = 2.0;
        assert!(generate(&c).is_err());
    }
}
