//! Checkpoint container.
//!
//! Layout: `SEHRCKPT`, version (u32 LE), byte-order marker (u32 LE
//! `0x0A0B0C0D`), header length (u64 LE), JSON header, then every parameter
//! as raw little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::camera::RigConfig;
use crate::error::{Error, Result};
use crate::net::{ModelWeights, NetConfig, SnmcMode, SnmgMode};
use crate::render::RenderSettings;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEHRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const BYTE_ORDER_MARK: u32 = 0x0A0B_0C0D;
const PREAMBLE: usize = 8 + 4 + 4 + 8;

/// Run settings stored next to the weights so inference reproduces training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub snmg: SnmgMode,
    pub snmc: SnmcMode,
    pub rig: RigConfig,
    pub render: RenderSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        net: ckpt.weights.config.clone(),
        meta: ckpt.meta.clone(),
        params: ckpt
            .weights
            .params
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = ckpt.weights.param_count();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * floats);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&BYTE_ORDER_MARK.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in ckpt.weights.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::parse(path, 0, msg);
    if bytes.len() < PREAMBLE || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (magic mismatch)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    if u32_at(12) != BYTE_ORDER_MARK {
        return Err(bad(format!("byte-order marker {:#010x}", u32_at(12))));
    }
    let hlen = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let body = PREAMBLE
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body])?;
    let mut params = BTreeMap::new();
    let mut off = body;
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let end = off + 4 * n;
        if end > bytes.len() {
            return Err(bad(format!("truncated data for {}", e.name)));
        }
        let data = bytes[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        off = end;
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    let weights = ModelWeights { config: header.net, params };
    weights.check_layout()?;
    Ok(Checkpoint { weights, meta: header.meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    // write-then-rename so an interrupted save keeps the previous file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_weights;

    fn sample() -> Checkpoint {
        let cfg = NetConfig { resolution: 16, base_width: 8, groups: 4, hidden: 8, blocks: 1, ..Default::default() };
        Checkpoint {
            weights: init_weights(&cfg, 3).unwrap(),
            meta: CheckpointMeta {
                step: 17,
                snmg: SnmgMode::FrontOnly,
                snmc: SnmcMode::Off,
                rig: RigConfig::default(),
                render: RenderSettings::default(),
            },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sehr");
        let c = sample();
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        let q = dir.path().join("b.sehr");
        save_checkpoint(&back, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn preamble_layout() {
        let b = encode_checkpoint(&sample()).unwrap();
        assert_eq!(&b[..8], b"SEHRCKPT");
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[0x0D, 0x0C, 0x0B, 0x0A]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let b = encode_checkpoint(&sample()).unwrap();
        let p = Path::new("x.sehr");
        let mut wrong_magic = b.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&wrong_magic, p), Err(Error::Parse { .. })));
        let mut swapped = b.clone();
        swapped[12..16].reverse();
        assert!(matches!(decode_checkpoint(&swapped, p), Err(Error::Parse { .. })));
        assert!(matches!(decode_checkpoint(&b[..b.len() - 3], p), Err(Error::Parse { .. })));
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
    }
}
