//! `TSCK0001` checkpoints: magic, u64 LE header length, JSON header, then all
//! parameters as one little-endian f32 blob. Header offsets are relative to
//! the blob start.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{Param, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::stacker::ChannelStats;

pub const MAGIC: &[u8; 8] = b"TSCK0001";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

/// Everything inference needs besides the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// Input normalization fitted on the training tiles.
    pub stats: Option<Vec<ChannelStats>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    params: Vec<ParamEntry>,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UNet<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let params = self
            .model
            .params()
            .iter()
            .map(|p| {
                let bytes = p.data.len() * 4;
                let e = ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        let header = Header {
            config: self.model.config().clone(),
            params,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("encode checkpoint header", e))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing TSCK0001 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let blob_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..blob_start])
            .map_err(|e| Error::json(format!("checkpoint header in {}", origin.display()), e))?;
        let blob = &bytes[blob_start..];
        let mut params = Vec::with_capacity(header.params.len());
        for e in header.params {
            let n: usize = e.shape.iter().product();
            if e.bytes != n * 4 || e.offset.checked_add(e.bytes).is_none_or(|end| end > blob.len()) {
                return Err(bad(format!("parameter {} lies outside the blob", e.name)));
            }
            let data = blob[e.offset..e.offset + e.bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Param {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Checkpoint {
            model: UNet::from_params(header.config, params)?,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
