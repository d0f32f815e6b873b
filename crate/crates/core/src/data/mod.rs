//! Datasets: CIFAR binary records, synthetic shape scenes, the `FSDS`
//! container, batching and metrics.

mod cifar;
pub(crate) mod container;
mod metrics;
mod synthetic;

pub use cifar::{encode_cifar_record, load_cifar_binary, parse_cifar, CifarVariant};
pub use container::{decode_container, encode_container, read_container, write_container, MAGIC};
pub use metrics::{accuracy, confusion_iou, miou};
pub use synthetic::{gen_synthetic_classification, gen_synthetic_segmentation, inside, ShapeKind, SyntheticConfig};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One image with its class label and, for segmentation, a per-pixel mask
/// (`0` background, `k + 1` for class `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `1×C×H×W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub mask: Option<Vec<u8>>,
}

/// Per-channel mean and standard deviation over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(images: &[LabeledImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Input("cannot normalize an empty dataset".into()))?;
        let c = first.pixels.shape().c;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for img in images {
            let s = img.pixels.shape();
            for ch in 0..c {
                for &v in img.pixels.plane(0, ch) {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            count += s.spatial();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Normalization { mean, std })
    }
}

/// Random crop with zero padding and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

/// A stacked mini-batch. `labels` holds one entry per image for
/// classification and one per pixel for segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Normalize, optionally augment, and stack `items`. With `segment` set the
/// labels are the masks.
pub fn make_batch<R: Rng + ?Sized>(
    items: &[&LabeledImage],
    norm: &Normalization,
    augment: Option<Augment>,
    segment: bool,
    rng: &mut R,
) -> Result<Batch> {
    let first = items.first().ok_or_else(|| Error::Input("empty batch".into()))?.pixels.shape();
    let (c, h, w) = (first.c, first.h, first.w);
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    let mut labels = Vec::with_capacity(if segment { items.len() * h * w } else { items.len() });
    for img in items {
        let s = img.pixels.shape();
        if (s.c, s.h, s.w) != (c, h, w) {
            return Err(Error::dim("make_batch", format!("image {s} in a batch of {first}")));
        }
        let (dy, dx, flip) = match augment {
            Some(a) => (
                rng.random_range(0..=2 * a.pad) as isize - a.pad as isize,
                rng.random_range(0..=2 * a.pad) as isize - a.pad as isize,
                a.flip && rng.random_bool(0.5),
            ),
            None => (0, 0, false),
        };
        // Output pixel (i, j) reads source (i + dy, j' + dx) where j' is the
        // possibly mirrored column; out-of-range reads are zero padding.
        let src = |i: usize, j: usize| -> Option<(usize, usize)> {
            let j = if flip { w - 1 - j } else { j };
            let (si, sj) = (i as isize + dy, j as isize + dx);
            (si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w).then_some((si as usize, sj as usize))
        };
        for ch in 0..c {
            let plane = img.pixels.plane(0, ch);
            for i in 0..h {
                for j in 0..w {
                    let v = match src(i, j) {
                        Some((si, sj)) => plane[si * w + sj],
                        None => 0.0,
                    };
                    data.push((v - norm.mean[ch]) / norm.std[ch]);
                }
            }
        }
        if segment {
            let mask = img
                .mask
                .as_ref()
                .ok_or_else(|| Error::Input("segmentation batch needs masks".into()))?;
            for i in 0..h {
                for j in 0..w {
                    labels.push(src(i, j).map_or(0, |(si, sj)| mask[si * w + sj] as usize));
                }
            }
        } else {
            labels.push(img.label);
        }
    }
    Ok(Batch {
        x: Tensor::new(Shape::new(items.len(), c, h, w), data)?,
        labels,
    })
}
