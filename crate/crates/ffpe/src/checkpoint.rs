//! Training checkpoints: `FFPECKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::path::{Path, PathBuf};

use ffpe_core::model::Generator;
use ffpe_core::tensor::Tensor;
use ffpe_core::train::{RngState, Snapshot, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FFPECKPT";
pub const SCHEMA: &str = "ffpe-checkpoint/1";

pub fn file_name(iteration: u64) -> String {
    format!("ckpt_{iteration}.bin")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub iteration: u64,
    pub config: TrainConfig,
    /// Encoder taps the projection heads were built for.
    pub layer_ids: Vec<usize>,
    pub rng: RngState,
    pub adam_steps: [u64; 3],
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub snapshot: Snapshot<f32>,
}

impl Checkpoint {
    pub fn from_state(config: &TrainConfig, state: &TrainState<f32>) -> Self {
        Self { config: config.clone(), snapshot: state.snapshot() }
    }

    pub fn into_state(self) -> Result<TrainState<f32>> {
        Ok(TrainState::from_snapshot(&self.config, self.snapshot)?)
    }

    pub fn header(&self) -> Header {
        let layer_ids = if self.config.layer_ids.is_empty() {
            self.config.generator.default_layer_ids()
        } else {
            self.config.layer_ids.clone()
        };
        Header {
            schema: SCHEMA.into(),
            iteration: self.snapshot.iteration,
            config: self.config.clone(),
            layer_ids,
            rng: self.snapshot.rng,
            adam_steps: self.snapshot.adam_steps,
            tensors: self
                .snapshot
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let numel: usize = self.snapshot.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.snapshot.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, format!("not a checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing FFPECKPT magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|source| Error::Json { path: path.into(), source })?;
        if header.schema != SCHEMA {
            return Err(Error::format(path, format!("unsupported schema `{}`, expected `{SCHEMA}`", header.schema)));
        }
        let mut data = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 4 * n {
                return Err(bad(&format!("truncated data for `{}`", e.name)));
            }
            let (head, rest) = data.split_at(4 * n);
            let values = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, values)?));
            data = rest;
        }
        if !data.is_empty() {
            return Err(bad(&format!("{} trailing bytes", data.len())));
        }
        let snapshot =
            Snapshot { iteration: header.iteration, rng: header.rng, adam_steps: header.adam_steps, tensors };
        Ok(Self { config: header.config, snapshot })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let tmp = path.with_extension("bin.partial");
        fs::write(&tmp, self.to_bytes()).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Only the generator, for inference.
    pub fn generator(&self) -> Result<Generator<f32>> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut g = Generator::<f32>::new(self.config.generator.clone(), &mut rng)?;
        let names = g.params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let key = format!("G/{name}");
            let t = self
                .snapshot
                .tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| ffpe_core::Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != g.params.tensors()[i].shape() {
                return Err(ffpe_core::Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, generator expects {:?}",
                    t.shape(),
                    g.params.tensors()[i].shape()
                ))
                .into());
            }
            g.params.tensors_mut()[i] = t.clone();
        }
        Ok(g)
    }
}

/// Highest-iteration `ckpt_<n>.bin` in `dir`.
pub fn latest(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let n = path
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("ckpt_"))
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(n) = n {
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ffpe_core::train::tiny_config;

    #[test]
    fn roundtrip_preserves_every_bit() {
        let cfg = tiny_config(4);
        let state = TrainState::<f32>::new(&cfg).unwrap();
        let ck = Checkpoint::from_state(&cfg, &state);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(file_name(0));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.header().layer_ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(back.generator().unwrap().params, state.generator.params);
        assert_eq!(latest(dir.path()).unwrap(), Some(path.clone()));
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
        assert!(Checkpoint::from_bytes(b"PNG.....", &path).unwrap_err().to_string().contains("magic"));
    }
}
