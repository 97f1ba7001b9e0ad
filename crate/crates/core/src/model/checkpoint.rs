//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! b"SEGMCKPT" | u32 version | u32 header_len | header JSON
//! u32 tensor_count | { u16 name_len | name | u32 len | f64 × len }*
//! ```
//!
//! The header carries `K`, `D`, the stride, a config hash, and the layer
//! layout with weights stripped; tensors are matched back by canonical name.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SegModel;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer, Sequential};

const MAGIC: &[u8; 8] = b"SEGMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub config_hash: String,
    #[serde(default)]
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    encoder: Vec<LayerSpec>,
    decoder: Vec<LayerSpec>,
}

fn layout(seq: &Sequential) -> Vec<LayerSpec> {
    seq.layers
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => LayerSpec::Conv {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
            },
            Layer::Relu => LayerSpec::Relu,
        })
        .collect()
}

fn rebuild(specs: &[LayerSpec]) -> Sequential {
    Sequential::new(
        specs
            .iter()
            .map(|s| match *s {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => Layer::Conv(Conv2d::zeroed(in_channels, out_channels, kernel, stride)),
                LayerSpec::Relu => Layer::Relu,
            })
            .collect(),
    )
}

/// Serializes a model into the checkpoint byte format.
pub fn write_checkpoint(model: &SegModel, config_hash: &str, step: u64, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        meta: CheckpointMeta {
            num_classes: model.num_classes(),
            feature_dim: model.feature_dim(),
            stride: model.stride(),
            in_channels: model.in_channels(),
            config_hash: config_hash.to_string(),
            step,
        },
        encoder: layout(model.encoder()),
        decoder: layout(model.decoder()),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let params = model.params();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, data) in params {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(data.len() as u32).to_le_bytes())?;
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Parses the checkpoint byte format.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(SegModel, CheckpointMeta)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = read_u32(r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = SegModel::new(
        rebuild(&header.encoder),
        rebuild(&header.decoder),
        header.meta.num_classes,
    )?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let count = read_u32(r)? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            names.len()
        )));
    }
    let mut slots = model.params_mut();
    for _ in 0..count {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let idx = names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        let len = read_u32(r)? as usize;
        if len != slots[idx].len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected {} values, found {len}",
                slots[idx].len()
            )));
        }
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated tensor {name}: {e}")))?;
        for (dst, chunk) in slots[idx].iter_mut().zip(buf.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &SegModel, config_hash: &str, step: u64, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, config_hash, step, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SegModel, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}
