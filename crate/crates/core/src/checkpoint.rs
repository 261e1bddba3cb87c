//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `BEDLCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! tensor as little-endian `f64` in store order, followed by the Adam first
//! and second moment buffers in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::rng::{RngState, SeededRng};
use crate::tensor::Tensor;
use crate::train::{Adam, Task, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"BEDLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Hex SHA-256 of the JSON-serialized training configuration.
    pub config_hash: String,
    pub config: TrainConfig,
    pub spec: NetworkSpec,
    pub task: Task,
    pub epoch: usize,
    pub adam_step: u64,
    pub rng: RngState,
    pub params: Vec<TensorEntry>,
    pub standardizer: Option<Standardizer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(cfg)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format(detail.into())
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, standardizer: Option<Standardizer>) -> Result<Self> {
        let store = &trainer.network.store;
        Ok(Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                config_hash: config_hash(&trainer.cfg)?,
                config: trainer.cfg.clone(),
                spec: trainer.network.spec().clone(),
                task: trainer.task,
                epoch: trainer.epoch,
                adam_step: trainer.adam.t,
                rng: trainer.rng.state(),
                params: store
                    .iter()
                    .map(|(_, p)| TensorEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                    })
                    .collect(),
                standardizer,
            },
            params: store.iter().map(|(_, p)| p.value.clone()).collect(),
            adam_m: trainer.adam.m.clone(),
            adam_v: trainer.adam.v.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let numel: usize = self.params.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 24 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format_err(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(format_err("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != version {
            return Err(format_err("header version disagrees with preamble"));
        }
        if config_hash(&header.config)? != header.config_hash {
            return Err(format_err("config hash mismatch"));
        }
        let mut payload = body[hlen..].chunks_exact(8);
        let expected: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != 3 * expected || !payload.remainder().is_empty() {
            return Err(format_err(format!(
                "payload holds {} values, expected {}",
                (body.len() - hlen) / 8,
                3 * expected
            )));
        }
        let mut read = |e: &TensorEntry| -> Result<Tensor> {
            let n = e.shape.iter().product();
            let data = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), data)
        };
        let mut sections = [Vec::new(), Vec::new(), Vec::new()];
        for section in sections.iter_mut() {
            for e in &header.params {
                section.push(read(e)?);
            }
        }
        let [params, adam_m, adam_v] = sections;
        Ok(Self {
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Network with the stored parameter values.
    pub fn network(&self) -> Result<Network> {
        let h = &self.header;
        let mut net = Network::init(h.spec.clone(), &h.config.init, &mut SeededRng::new(0, 0))?;
        let ids: Vec<_> = net.store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(format_err(format!(
                "checkpoint has {} tensors, network needs {}",
                self.params.len(),
                ids.len()
            )));
        }
        for ((id, value), entry) in ids.into_iter().zip(&self.params).zip(&h.params) {
            let p = net.store.get_mut(id);
            if p.name != entry.name || p.value.shape() != value.shape() {
                return Err(format_err(format!(
                    "tensor {} {:?} does not match network tensor {} {:?}",
                    entry.name,
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(net)
    }

    /// Trainer positioned exactly where this checkpoint was taken.
    pub fn trainer(&self) -> Result<Trainer> {
        let h = &self.header;
        let network = self.network()?;
        let mut adam = Adam::new(h.config.adam.clone(), &network.store);
        adam.t = h.adam_step;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        Ok(Trainer {
            network,
            adam,
            cfg: h.config.clone(),
            rng: SeededRng::from_state(&h.rng)?,
            epoch: h.epoch,
            task: h.task,
        })
    }
}
