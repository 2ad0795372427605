// SPDX-License-Identifier: Apache-2.0

//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                        |
//! |--------------|------------------------------------------------|
//! | 4            | `format_version: u32`                          |
//! | 8            | magic `ENDPCKPT`                               |
//! | 8            | header length `h: u64`                         |
//! | h            | UTF-8 JSON header (spec, counters, optimizer)  |
//! | 8·P          | parameters, `f64`                              |
//! | 8·P (Adam)   | first-moment buffer                            |
//! | 8·P (Adam)   | second-moment buffer                           |
//!
//! `P` is `header.params`. Floats are stored as raw bit patterns, so a
//! load followed by a save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optimizer::{Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkSpec};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ENDPCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: NetworkSpec,
    params: usize,
    optimizer: OptimizerKind,
    optimizer_t: u64,
    /// Completed epochs.
    epoch: u64,
    /// Global step counter; with `seed` it addresses all training noise.
    step: u64,
    seed: u64,
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Optimizer,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.model.spec().clone(),
            params: self.model.num_params(),
            optimizer: self.optimizer.kind,
            optimizer_t: self.optimizer.t,
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let p = self.model.num_params();
        let mut out = Vec::with_capacity(20 + json.len() + 24 * p);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let buffers = [self.model.params(), &self.optimizer.m, &self.optimizer.v];
        for buf in buffers {
            for v in buf {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 {
            return Err(bad("file too short"));
        }
        let version = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        if &bytes[4..12] != MAGIC {
            return Err(bad("missing ENDPCKPT magic"));
        }
        let h = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(h)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let p = header.params;
        let buffers = match header.optimizer {
            OptimizerKind::Adam => 3,
            OptimizerKind::Sgd => 1,
        };
        if bytes.len() != header_end + 8 * p * buffers {
            return Err(bad("payload size does not match header"));
        }
        let read = |k: usize| -> Vec<f64> {
            let start = header_end + 8 * p * k;
            bytes[start..start + 8 * p]
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect()
        };
        let model = Model::from_params(header.spec, read(0))?;
        let (m, v) = match header.optimizer {
            OptimizerKind::Adam => (read(1), read(2)),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Checkpoint {
            model,
            optimizer: Optimizer {
                kind: header.optimizer,
                t: header.optimizer_t,
                m,
                v,
            },
            epoch: header.epoch,
            step: header.step,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never clobbers the last
        // good checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
