//! Binary checkpoint files.
//!
//! Layout (integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `SPHRCKPT`                        |
//! | 8      | 4    | format version                          |
//! | 12     | 1    | stage tag (1 or 2)                      |
//! | 13     | 3    | reserved, zero                          |
//! | 16     | 32   | architecture hash                       |
//! | 48     | 32   | run configuration hash                  |
//! | 80     | 8    | payload length                          |
//! | 88     | 4    | chunk size                              |
//! | 92     | 4    | chunk count                             |
//! | 96     | 32   | SHA-256 of bytes 0..96                  |
//! | 128    | 32·n | SHA-256 of each payload chunk           |
//! | …      | len  | bincode-encoded training state          |
//!
//! The payload stores every `f64` by its bit pattern, so a round trip is exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use sphroute_core::trainer::{Stage, TrainState};

use crate::config::{Hash, RunConfig};
use crate::error::{io_err, CheckpointError, Error, Result};

pub const MAGIC: &[u8; 8] = b"SPHRCKPT";
pub const VERSION: u32 = 1;
pub const CHUNK_SIZE: usize = 1 << 16;
const HEADER_LEN: usize = 96;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: Hash,
    pub config_hash: Hash,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(cfg: &RunConfig, state: TrainState) -> Self {
        Self {
            arch_hash: cfg.arch_hash(),
            config_hash: cfg.hash(),
            state,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = bincode::serialize(&self.state).expect("training state serialises");
        let chunks: Vec<&[u8]> = payload.chunks(CHUNK_SIZE).collect();
        let mut out = Vec::with_capacity(HEADER_LEN + DIGEST_LEN * (chunks.len() + 1) + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.state.stage.number());
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&self.arch_hash);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&(CHUNK_SIZE as u32).to_le_bytes());
        out.extend_from_slice(&(chunks.len() as u32).to_le_bytes());
        let header_digest = Sha256::digest(&out);
        out.extend_from_slice(&header_digest);
        for c in &chunks {
            out.extend_from_slice(&Sha256::digest(c));
        }
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(CheckpointError::Truncated {
                    needed: n as u64,
                    found: bytes.len() as u64,
                })
            } else {
                Ok(())
            }
        };
        need(MAGIC.len())?;
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        need(HEADER_LEN + DIGEST_LEN)?;
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if Sha256::digest(&bytes[..HEADER_LEN]).as_slice() != &bytes[HEADER_LEN..HEADER_LEN + DIGEST_LEN] {
            return Err(CheckpointError::Header(HEADER_LEN as u64));
        }
        let arch_hash: Hash = bytes[16..48].try_into().unwrap();
        let config_hash: Hash = bytes[48..80].try_into().unwrap();
        let len = u64::from_le_bytes(bytes[80..88].try_into().unwrap());
        let chunk = u32_at(88) as u64;
        let count = u32_at(92) as u64;
        if chunk == 0 || count != len.div_ceil(chunk) {
            return Err(CheckpointError::Header(HEADER_LEN as u64));
        }
        let table = (HEADER_LEN + DIGEST_LEN) as u64;
        let start = table + count * DIGEST_LEN as u64;
        let end = start + len;
        need(end as usize)?;
        if (bytes.len() as u64) > end {
            return Err(CheckpointError::Trailing(bytes.len() as u64 - end));
        }
        for i in 0..count {
            let lo = start + i * chunk;
            let hi = (lo + chunk).min(end);
            let d = (table + i * DIGEST_LEN as u64) as usize;
            if Sha256::digest(&bytes[lo as usize..hi as usize]).as_slice() != &bytes[d..d + DIGEST_LEN] {
                return Err(CheckpointError::Corrupt { chunk: i, start: lo, end: hi });
            }
        }
        let state: TrainState =
            bincode::deserialize(&bytes[start as usize..]).map_err(|e| CheckpointError::Payload(e.to_string()))?;
        if state.stage.number() != bytes[12] {
            return Err(CheckpointError::Payload(format!("stage tag {} disagrees with payload", bytes[12])));
        }
        Ok(Self {
            arch_hash,
            config_hash,
            state,
        })
    }

    pub fn stage(&self) -> Stage {
        self.state.stage
    }

    /// Refuses a checkpoint written under a different architecture or configuration.
    pub fn check(&self, cfg: &RunConfig) -> Result<()> {
        for (what, expected, found) in [
            ("architecture", cfg.arch_hash(), self.arch_hash),
            ("configuration", cfg.hash(), self.config_hash),
        ] {
            if expected != found {
                return Err(Error::ConfigMismatch {
                    what,
                    expected: hex::encode(expected),
                    found: hex::encode(found),
                });
            }
        }
        Ok(())
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, ckpt.encode()).map_err(io_err(path))
}

/// Reads and verifies a checkpoint without checking its configuration.
pub fn load_unchecked(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(Checkpoint::decode(&bytes)?)
}

/// Reads a checkpoint and refuses it unless it was written under `cfg`.
pub fn load(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ckpt = load_unchecked(path)?;
    ckpt.check(cfg)?;
    Ok(ckpt)
}
