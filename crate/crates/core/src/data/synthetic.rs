//! Seeded shape scenes for multi-scale recognition and segmentation.
//!
//! Each object is one of a fixed set of shapes inscribed in a square
//! bounding box whose area is `scale × image area`; the scale is drawn
//! log-uniformly from the configured range so small and large instances of
//! the same class co-occur.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 7] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Frame,
    ];

    /// Shape area over bounding-box area.
    pub fn fill_factor(self) -> f64 {
        use std::f64::consts::PI;
        match self {
            ShapeKind::Square => 1.0,
            ShapeKind::Disk => PI / 4.0,
            ShapeKind::Triangle | ShapeKind::Diamond => 0.5,
            ShapeKind::Cross => 5.0 / 9.0,
            ShapeKind::Ring => 3.0 * PI / 16.0,
            ShapeKind::Frame => 0.75,
        }
    }
}

/// Membership test in box-normalized coordinates (`u`, `v` in `[-1, 1]`,
/// `v` pointing down).
pub fn inside(kind: ShapeKind, u: f64, v: f64) -> bool {
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return false;
    }
    let r2 = u * u + v * v;
    match kind {
        ShapeKind::Square => true,
        ShapeKind::Disk => r2 <= 1.0,
        ShapeKind::Triangle => u.abs() <= (v + 1.0) / 2.0,
        ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        ShapeKind::Cross => u.abs() <= 1.0 / 3.0 || v.abs() <= 1.0 / 3.0,
        ShapeKind::Ring => (0.25..=1.0).contains(&r2),
        ShapeKind::Frame => u.abs().max(v.abs()) >= 0.5,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub count: usize,
    /// Number of shape classes, taken from the front of [`ShapeKind::ALL`].
    pub classes: usize,
    /// Bounding-box area as a fraction of the image, sampled log-uniformly.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Objects per scene (0 or 1).
    pub objects: usize,
    /// Extra small rectangles of random color that carry no label.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: 16,
            count: 1000,
            classes: 7,
            scale_min: 0.05,
            scale_max: 0.6,
            noise: 0.1,
            objects: 1,
            distractors: 0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::Config(format!("image_size must be at least 4, got {}", self.image_size)));
        }
        if self.classes < 2 || self.classes > ShapeKind::ALL.len() {
            return Err(Error::Config(format!(
                "classes must be in 2..={}, got {}",
                ShapeKind::ALL.len(),
                self.classes
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "scale range must satisfy 0 < min <= max <= 1, got {}..{}",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if self.objects > 1 {
            return Err(Error::Config("at most one object per scene".into()));
        }
        Ok(())
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

fn contrast(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0
}

struct Scene {
    pixels: Tensor,
    mask: Vec<u8>,
}

fn render(cfg: &SyntheticConfig, label: usize, rng: &mut ChaCha8Rng) -> Scene {
    let s = cfg.image_size;
    let sf = s as f64;
    let bg = random_color(rng);
    let mut fg = random_color(rng);
    while contrast(&fg, &bg) < 0.3 {
        fg = random_color(rng);
    }
    let mut color = vec![bg; s * s];
    let mut mask = vec![0u8; s * s];

    for _ in 0..cfg.distractors {
        let c = random_color(rng);
        let side = rng.random_range(1..=(s / 6).max(1));
        let (i0, j0) = (rng.random_range(0..=s - side), rng.random_range(0..=s - side));
        for i in i0..i0 + side {
            for j in j0..j0 + side {
                color[i * s + j] = c;
            }
        }
    }

    if cfg.objects == 1 {
        let kind = ShapeKind::ALL[label];
        let (lo, hi) = (cfg.scale_min.ln(), cfg.scale_max.ln());
        let scale = if hi > lo { rng.random_range(lo..=hi).exp() } else { cfg.scale_min };
        let a = scale.sqrt() * sf;
        let (cy, cx) = (rng.random_range(a / 2.0..=sf - a / 2.0), rng.random_range(a / 2.0..=sf - a / 2.0));
        let half = a / 2.0;
        for i in 0..s {
            for j in 0..s {
                let v = (i as f64 + 0.5 - cy) / half;
                let u = (j as f64 + 0.5 - cx) / half;
                if inside(kind, u, v) {
                    color[i * s + j] = fg;
                    mask[i * s + j] = label as u8 + 1;
                }
            }
        }
    }

    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("valid std"));
    let mut data = vec![0.0; 3 * s * s];
    for ch in 0..3 {
        for p in 0..s * s {
            let mut v = color[p][ch];
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            data[ch * s * s + p] = v.clamp(0.0, 1.0);
        }
    }
    Scene {
        pixels: Tensor::new(Shape::new(1, 3, s, s), data).expect("sized buffer"),
        mask,
    }
}

fn generate(cfg: &SyntheticConfig, with_mask: bool) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count)
        .map(|i| {
            // Labels cycle through the classes so the histogram is exactly balanced.
            let label = i % cfg.classes;
            let scene = render(cfg, label, &mut rng);
            LabeledImage {
                pixels: scene.pixels,
                label,
                mask: with_mask.then_some(scene.mask),
            }
        })
        .collect())
}

/// One shape per image; the label is the shape kind.
pub fn gen_synthetic_classification(cfg: &SyntheticConfig) -> Result<Vec<LabeledImage>> {
    generate(cfg, false)
}

/// As [`gen_synthetic_classification`] plus masks (`0` background, `k + 1`
/// inside a shape of class `k`).
pub fn gen_synthetic_segmentation(cfg: &SyntheticConfig) -> Result<Vec<LabeledImage>> {
    generate(cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_factors_match_sampled_area() {
        let n = 400;
        for kind in ShapeKind::ALL {
            let mut hits = 0;
            for i in 0..n {
                for j in 0..n {
                    let u = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                    let v = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                    hits += inside(kind, u, v) as usize;
                }
            }
            let frac = hits as f64 / (n * n) as f64;
            assert!((frac - kind.fill_factor()).abs() < 5e-3, "{kind:?}: {frac}");
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SyntheticConfig { classes: 1, ..Default::default() },
            SyntheticConfig { scale_min: 0.0, ..Default::default() },
            SyntheticConfig { scale_min: 0.5, scale_max: 0.4, ..Default::default() },
            SyntheticConfig { noise: -1.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
