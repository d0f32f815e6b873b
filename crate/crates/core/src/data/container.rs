//! `FSDS` container: a 16-byte little-endian header (magic, version, record
//! count, record length) followed by fixed-length records of
//! `label u16 | optional H×W mask bytes | 3×H×W pixel bytes`.

use std::path::Path;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FSDS";
const VERSION: u32 = 1;
const HEADER: usize = 16;

pub(crate) fn header(count: usize, record_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(record_len as u32).to_le_bytes());
    out
}

/// Parse the header; returns `(count, record_len)`.
pub(crate) fn parse_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < HEADER {
        return Err(Error::Format {
            offset: bytes.len(),
            detail: format!("header needs {HEADER} bytes"),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected FSDS".into(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(4) != VERSION as usize {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {}", word(4)),
        });
    }
    Ok((word(8), word(12)))
}

fn quantize(v: f64) -> Result<u8> {
    let b = (v * 255.0).round();
    if !(0.0..=255.0).contains(&b) {
        return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(b as u8)
}

pub fn encode_container(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| Error::Input("empty dataset".into()))?;
    let s = first.pixels.shape();
    if s.c != 3 || s.h != s.w {
        return Err(Error::dim("encode_container", format!("images must be square RGB, got {s}")));
    }
    let with_mask = first.mask.is_some();
    let rec = 2 + if with_mask { s.spatial() } else { 0 } + 3 * s.spatial();
    let mut out = header(images.len(), rec);
    out.reserve(rec * images.len());
    for img in images {
        if img.pixels.shape() != s || img.mask.is_some() != with_mask {
            return Err(Error::dim("encode_container", "records must share shape and mask presence"));
        }
        let label = u16::try_from(img.label).map_err(|_| Error::Input(format!("label {} exceeds u16", img.label)))?;
        out.extend_from_slice(&label.to_le_bytes());
        if let Some(m) = &img.mask {
            out.extend_from_slice(m);
        }
        for &v in img.pixels.data() {
            out.push(quantize(v)?);
        }
    }
    Ok(out)
}

/// Image side and mask presence from a record length: `2 + 3a²` without a
/// mask, `2 + 4a²` with one (both never hold for the same length).
fn geometry(record_len: usize) -> Option<(usize, bool)> {
    let body = record_len.checked_sub(2)?;
    let isqrt = |v: usize| -> Option<usize> {
        let r = (v as f64).sqrt().round() as usize;
        (r > 0 && r * r == v).then_some(r)
    };
    if body % 3 == 0 {
        if let Some(a) = isqrt(body / 3) {
            return Some((a, false));
        }
    }
    if body % 4 == 0 {
        if let Some(a) = isqrt(body / 4) {
            return Some((a, true));
        }
    }
    None
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    let (count, rec) = parse_header(bytes)?;
    let (side, with_mask) = geometry(rec).ok_or_else(|| Error::Format {
        offset: 12,
        detail: format!("record length {rec} matches no square RGB layout"),
    })?;
    let need = count
        .checked_mul(rec)
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| Error::Format {
            offset: 8,
            detail: "record count overflows".into(),
        })?;
    if bytes.len() != need {
        return Err(Error::Format {
            offset: bytes.len().min(need),
            detail: format!("expected {need} bytes for {count} records, found {}", bytes.len()),
        });
    }
    let hw = side * side;
    let mut out = Vec::with_capacity(count);
    for r in bytes[HEADER..].chunks_exact(rec) {
        let label = u16::from_le_bytes([r[0], r[1]]) as usize;
        let (mask, px) = if with_mask {
            (Some(r[2..2 + hw].to_vec()), &r[2 + hw..])
        } else {
            (None, &r[2..])
        };
        out.push(LabeledImage {
            pixels: Tensor::new(Shape::new(1, 3, side, side), px.iter().map(|&b| b as f64 / 255.0).collect())?,
            label,
            mask,
        });
    }
    Ok(out)
}

pub fn write_container(path: impl AsRef<Path>, images: &[LabeledImage]) -> Result<()> {
    let bytes = encode_container(images)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_is_unambiguous() {
        assert_eq!(geometry(2 + 3 * 16 * 16), Some((16, false)));
        assert_eq!(geometry(2 + 4 * 16 * 16), Some((16, true)));
        assert_eq!(geometry(2 + 3 * 32 * 32), Some((32, false)));
        assert_eq!(geometry(7), None);
        for a in 1..200usize {
            assert!(geometry(2 + 3 * a * a) != geometry(2 + 4 * a * a));
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(decode_container(b"FSD"), Err(Error::Format { offset: 3, .. })));
        let mut h = header(1, 2 + 3 * 4);
        h[0] = b'X';
        assert!(matches!(decode_container(&h), Err(Error::Format { offset: 0, .. })));
        let h = header(2, 2 + 3 * 4);
        assert!(matches!(decode_container(&h), Err(Error::Format { offset: 16, .. })));
    }
}
