//! Checkpoint file: a JSON manifest line followed by one blob of
//! little-endian `f32` tensors (parameters, then optimiser accumulators).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{MonetError, Result};
use crate::model::MonetArch;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const FORMAT: &str = "monet-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of optimisation steps already applied.
    pub step: u64,
    pub arch: MonetArch,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    /// RMSProp second-moment accumulators, keyed like `params`.
    pub optimizer: ParamStore<f32>,
    pub data_rng: ChaCha8Rng,
    pub model_rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    arch: MonetArch,
    config: TrainConfig,
    data_rng: ChaCha8Rng,
    model_rng: ChaCha8Rng,
    tensors: Vec<Entry>,
    blob_bytes: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    group: Group,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Optimizer,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::with_capacity(4 * (self.params.numel() + self.optimizer.numel()));
        let mut tensors = Vec::new();
        for (group, store) in [(Group::Param, &self.params), (Group::Optimizer, &self.optimizer)] {
            for (name, t) in store.iter() {
                tensors.push(Entry {
                    name: name.clone(),
                    group,
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset: blob.len() as u64,
                });
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            arch: self.arch.clone(),
            config: self.config.clone(),
            data_rng: self.data_rng.clone(),
            model_rng: self.model_rng.clone(),
            tensors,
            blob_bytes: blob.len() as u64,
            crc32: crc32fast::hash(&blob),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| MonetError::CheckpointFormat(m);
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(bad(format!("format {:?} version {}", manifest.format, manifest.version)));
        }
        let blob = &bytes[nl + 1..];
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(bad(format!("blob has {} bytes, manifest declares {}", blob.len(), manifest.blob_bytes)));
        }
        if crc32fast::hash(blob) != manifest.crc32 {
            return Err(MonetError::Checksum { what: "checkpoint tensor blob".into() });
        }
        let mut params = ParamStore::new();
        let mut optimizer = ParamStore::new();
        let mut expected_offset = 0u64;
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(bad(format!("{}: offset {} where {expected_offset} was expected", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset as usize + 4 * n;
            if end > blob.len() {
                return Err(bad(format!("{}: extends past the blob", e.name)));
            }
            let data = blob[e.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset = end as u64;
            let store = if e.group == Group::Param { &mut params } else { &mut optimizer };
            if store.get(&e.name).is_some() {
                return Err(bad(format!("{}: duplicate tensor", e.name)));
            }
            store.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        if expected_offset != manifest.blob_bytes {
            return Err(bad("blob has bytes not owned by any tensor".into()));
        }
        let specs = manifest.arch.param_specs()?;
        params.check_against(&specs)?;
        optimizer.check_against(&specs)?;
        Ok(Self {
            step: manifest.step,
            arch: manifest.arch,
            config: manifest.config,
            params,
            optimizer,
            data_rng: manifest.data_rng,
            model_rng: manifest.model_rng,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| MonetError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| MonetError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MonetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails with the list of offending tensors when the parameters do not fit `arch`.
    pub fn check_arch(&self, arch: &MonetArch) -> Result<()> {
        self.params.check_against(&arch.param_specs()?)
    }
}
