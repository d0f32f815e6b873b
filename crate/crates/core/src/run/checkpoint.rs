//! Checkpoints: the `FSDS` header (record length 0) followed by named blobs
//! `name_len u32 | name | shape 4×u32 | f64 data`, all little-endian.
//!
//! Parameters are stored under their own names, running statistics as
//! `{bn}.running_mean` / `{bn}.running_var`, and the input normalization as
//! `input.norm_mean` / `input.norm_std`.

use std::path::Path;

use crate::data::container::{header, parse_header};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Shape, Tensor};

const NORM_MEAN: &str = "input.norm_mean";
const NORM_STD: &str = "input.norm_std";

pub fn encode_blobs(blobs: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = header(blobs.len(), 0);
    for (name, t) in blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blobs(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let (count, rec) = parse_header(bytes)?;
    if rec != 0 {
        return Err(Error::Format {
            offset: 12,
            detail: format!("record length {rec}: this is a dataset container, not a blob file"),
        });
    }
    let mut pos = 16;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format {
            offset: *pos,
            detail: format!("truncated blob: need {n} more bytes"),
        })?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let word = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let at = pos;
        let len = word(take(&mut pos, 4)?);
        let name = std::str::from_utf8(take(&mut pos, len)?)
            .map_err(|_| Error::Format {
                offset: at + 4,
                detail: "blob name is not UTF-8".into(),
            })?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = word(take(&mut pos, 4)?);
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = take(&mut pos, shape.numel() * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos,
            detail: format!("{} trailing bytes after {count} blobs", bytes.len() - pos),
        });
    }
    Ok(out)
}

pub fn write_blobs(path: &Path, blobs: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode_blobs(blobs)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn read_blobs(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_blobs(&bytes)
}

fn column(v: &[f64]) -> Tensor {
    Tensor::from_kernel(Shape::new(1, v.len(), 1, 1), v.to_vec())
}

/// Every parameter, running statistic and the input normalization.
pub fn network_blobs(net: &Network, norm: &Normalization) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = net.store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for st in net.store.all_stats() {
        out.push((format!("{}.running_mean", st.name), column(&st.mean)));
        out.push((format!("{}.running_var", st.name), column(&st.var)));
    }
    out.push((NORM_MEAN.into(), column(&norm.mean)));
    out.push((NORM_STD.into(), column(&norm.std)));
    out
}

pub fn save_checkpoint(path: &Path, net: &Network, norm: &Normalization) -> Result<()> {
    write_blobs(path, &network_blobs(net, norm))
}

/// Overwrite the network's state from `blobs`; the names and shapes must
/// match the network exactly. Returns the stored normalization.
pub fn restore(net: &mut Network, blobs: Vec<(String, Tensor)>) -> Result<Normalization> {
    let expected = network_blobs(net, &Normalization::identity(net.spec.in_channels));
    if expected.len() != blobs.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, the configured network needs {}",
            blobs.len(),
            expected.len()
        )));
    }
    for ((en, et), (bn, bt)) in expected.iter().zip(&blobs) {
        if en != bn || et.shape() != bt.shape() {
            return Err(Error::Config(format!(
                "checkpoint does not match the configured network: expected `{en}` {}, found `{bn}` {}",
                et.shape(),
                bt.shape()
            )));
        }
    }
    let mut it = blobs.into_iter();
    for p in net.store.params_mut() {
        p.value = it.next().expect("length checked").1;
    }
    for st in net.store.all_stats_mut() {
        st.mean = it.next().expect("length checked").1.into_data();
        st.var = it.next().expect("length checked").1.into_data();
    }
    let mean = it.next().expect("length checked").1.into_data();
    let std = it.next().expect("length checked").1.into_data();
    Ok(Normalization { mean, std })
}

pub fn load_checkpoint(path: &Path, net: &mut Network) -> Result<Normalization> {
    restore(net, read_blobs(path)?)
}
