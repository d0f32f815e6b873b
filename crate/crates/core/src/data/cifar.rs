use std::path::Path;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    /// 20 super-classes (label byte 0 of a CIFAR-100 record).
    Cifar100Coarse,
    /// 100 classes (label byte 1).
    Cifar100Fine,
}

impl CifarVariant {
    pub fn name(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100Coarse => "cifar100_coarse",
            CifarVariant::Cifar100Fine => "cifar100_fine",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100_coarse" => Ok(CifarVariant::Cifar100Coarse),
            "cifar100_fine" => Ok(CifarVariant::Cifar100Fine),
            _ => Err(Error::Config(format!("unknown CIFAR variant `{name}`"))),
        }
    }

    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            _ => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100Coarse => 20,
            CifarVariant::Cifar100Fine => 100,
        }
    }

    fn label_index(self) -> usize {
        match self {
            CifarVariant::Cifar100Fine => 1,
            _ => 0,
        }
    }
}

/// Decode whole records; pixels become `byte / 255`.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Vec<LabeledImage>> {
    let rec = variant.record_len();
    let whole = bytes.len() / rec * rec;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole,
            detail: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - whole
            ),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / rec);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let offset = i * rec + variant.label_index();
        let label = r[variant.label_index()] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Format {
                offset,
                detail: format!("label {label} out of range for {}", variant.name()),
            });
        }
        let pixels = r[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0).collect();
        out.push(LabeledImage {
            pixels: Tensor::new(Shape::new(1, 3, SIDE, SIDE), pixels)?,
            label,
            mask: None,
        });
    }
    Ok(out)
}

/// Read a CIFAR binary file. The length is checked before any record is
/// decoded.
pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    let len = std::fs::metadata(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .len() as usize;
    let rec = variant.record_len();
    if len % rec != 0 {
        return Err(Error::Format {
            offset: len / rec * rec,
            detail: format!("file length {len} is not a multiple of the {rec}-byte record"),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_cifar(&bytes, variant)
}

/// Encode one record. `labels` gives the label bytes in file order (one for
/// CIFAR-10, coarse then fine for CIFAR-100); pixels must be multiples of
/// 1/255 in `[0, 1]`.
pub fn encode_cifar_record(pixels: &Tensor, labels: &[u8], variant: CifarVariant) -> Result<Vec<u8>> {
    if labels.len() != variant.label_bytes() {
        return Err(Error::Input(format!(
            "{} records carry {} label bytes, got {}",
            variant.name(),
            variant.label_bytes(),
            labels.len()
        )));
    }
    if pixels.shape() != Shape::new(1, 3, SIDE, SIDE) {
        return Err(Error::dim("encode_cifar_record", format!("pixels {} are not [1, 3, 32, 32]", pixels.shape())));
    }
    let mut out = Vec::with_capacity(variant.record_len());
    out.extend_from_slice(labels);
    for &v in pixels.data() {
        let b = (v * 255.0).round();
        if !(0.0..=255.0).contains(&b) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        out.push(b as u8);
    }
    Ok(out)
}
