//! Binary checkpoint: magic `FLNT`, a little-endian `u32` version, a `u32`
//! header length, a UTF-8 header of `key=value` and table lines, then the
//! float blobs back to back as little-endian `f32`.
//!
//! Header table lines are
//! `tensor <name> <dims comma-separated> <offset> <len>` and
//! `bn <layer> <mean|var> <offset> <len>`, offsets counted in floats from the
//! start of the blob section.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flarenet::{BatchNormState, ModelConfig, ModelKind, ModelParams, NUM_BLOCKS};

pub const MAGIC: &[u8; 4] = b"FLNT";
pub const VERSION: u32 = 1;

/// Trained model plus the state needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Seed all epoch shuffles derive from.
    pub rng_seed: u64,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut header = String::new();
        let channels: Vec<String> = cfg.block_channels.iter().map(usize::to_string).collect();
        let _ = writeln!(header, "kind={}", self.model.kind());
        let _ = writeln!(header, "input_side={}", cfg.input_side);
        let _ = writeln!(header, "block_channels={}", channels.join(","));
        let _ = writeln!(header, "g_dim={}", cfg.g_dim);
        let _ = writeln!(header, "epoch={}", self.epoch);
        let _ = writeln!(header, "rng_seed={}", self.rng_seed);
        let mut blobs: Vec<f32> = Vec::new();
        for p in &self.model.params {
            let dims: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(header, "tensor {} {} {} {}", p.name, dims.join(","), blobs.len(), p.tensor.numel());
            blobs.extend_from_slice(p.tensor.data());
        }
        for (layer, s) in self.model.bn.iter().enumerate() {
            for (which, v) in [("mean", &s.mean), ("var", &s.var)] {
                let _ = writeln!(header, "bn {layer} {which} {} {}", blobs.len(), v.len());
                blobs.extend_from_slice(v);
            }
        }
        let mut out = Vec::with_capacity(12 + header.len() + 4 * blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in blobs {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(fmt_err("file shorter than its fixed preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err("bad magic, not an FLNT file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version} (expected {VERSION})")));
        }
        let header_len = word(8) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(fmt_err("truncated header"));
        }
        let header = std::str::from_utf8(&body[..header_len]).map_err(|_| fmt_err("header is not UTF-8"))?;
        let blob_bytes = &body[header_len..];
        if blob_bytes.len() % 4 != 0 {
            return Err(fmt_err("blob section is not a whole number of f32 values"));
        }
        let blobs: Vec<f32> =
            blob_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();

        let mut keys: HashMap<&str, &str> = HashMap::new();
        let mut tensors: HashMap<String, (Vec<usize>, usize, usize)> = HashMap::new();
        let mut bn_slots: HashMap<(usize, String), (usize, usize)> = HashMap::new();
        let num = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(format!("bad integer {s:?}")));
        for line in header.lines().filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["tensor", name, dims, offset, len] => {
                    let shape = dims.split(',').map(num).collect::<Result<Vec<_>>>()?;
                    tensors.insert((*name).to_owned(), (shape, num(offset)?, num(len)?));
                }
                ["bn", layer, which, offset, len] => {
                    bn_slots.insert((num(layer)?, (*which).to_owned()), (num(offset)?, num(len)?));
                }
                [kv] => {
                    let (k, v) = kv.split_once('=').ok_or_else(|| fmt_err(format!("bad header line {line:?}")))?;
                    keys.insert(k, v);
                }
                _ => return Err(fmt_err(format!("bad header line {line:?}"))),
            }
        }
        let declared: usize = tensors.values().map(|t| t.2).chain(bn_slots.values().map(|s| s.1)).sum();
        if declared != blobs.len() {
            return Err(fmt_err(format!("header declares {declared} values, blob section holds {}", blobs.len())));
        }
        let key = |k: &str| keys.get(k).copied().ok_or_else(|| fmt_err(format!("missing header key {k}")));
        let slice = |offset: usize, len: usize| -> Result<Vec<f32>> {
            offset
                .checked_add(len)
                .filter(|&end| end <= blobs.len())
                .map(|end| blobs[offset..end].to_vec())
                .ok_or_else(|| fmt_err("blob extends past end of file (truncated?)"))
        };

        let kind: ModelKind = key("kind")?.parse().map_err(|_| fmt_err("bad model kind"))?;
        let channels: Vec<usize> = key("block_channels")?.split(',').map(num).collect::<Result<_>>()?;
        let block_channels: [usize; NUM_BLOCKS] =
            channels.try_into().map_err(|_| fmt_err(format!("block_channels must list {NUM_BLOCKS} values")))?;
        let config = ModelConfig { input_side: num(key("input_side")?)?, block_channels, g_dim: num(key("g_dim")?)? };
        config.validate().map_err(|e| fmt_err(e.to_string()))?;

        let mut bn = Vec::with_capacity(NUM_BLOCKS);
        for layer in 0..NUM_BLOCKS {
            let get = |which: &str| -> Result<Vec<f32>> {
                let &(o, l) =
                    bn_slots.get(&(layer, which.to_owned())).ok_or_else(|| fmt_err(format!("missing bn {layer} {which}")))?;
                slice(o, l)
            };
            bn.push(BatchNormState { mean: get("mean")?, var: get("var")? });
        }
        let model = ModelParams::from_named(
            kind,
            &config,
            |spec| {
                let (shape, offset, len) =
                    tensors.get(&spec.name).ok_or_else(|| fmt_err(format!("missing tensor {}", spec.name)))?;
                if *shape != spec.shape || shape.iter().product::<usize>() != *len {
                    return Err(fmt_err(format!(
                        "tensor {} declares shape {shape:?} / {len} values, model expects {:?}",
                        spec.name, spec.shape
                    )));
                }
                slice(*offset, *len)
            },
            bn,
        )
        .map_err(|e| match e {
            Error::Format(_) => e,
            other => fmt_err(other.to_string()),
        })?;
        if model.params.len() != tensors.len() {
            return Err(fmt_err("header lists tensors the model does not have"));
        }
        Ok(Checkpoint { model, epoch: num(key("epoch")?)?, rng_seed: key("rng_seed")?.parse().map_err(|_| fmt_err("bad rng_seed"))? })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
