//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `NEGTUNE\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter as little-endian `f32` in header order, followed by the Adam
//! first and second moments in the same order when the header records an
//! optimizer. Writing the same contents always produces the same bytes.

use super::{CodecConfig, CodecModel};
use crate::optim::{Adam, Moments};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NEGTUNE\0";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found}, expected {CHECKPOINT_VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Codec(#[from] super::CodecError),
}

/// Free-form key/value record of how the parameters came to be.
pub type Provenance = BTreeMap<String, String>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config_hash: String,
    config: CodecConfig,
    epoch: usize,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

/// Parameters plus the state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CodecConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub provenance: Provenance,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<Adam>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    }
}

impl Checkpoint {
    pub fn from_model(model: &CodecModel, epoch: usize, provenance: Provenance, optimizer: Option<&Adam>) -> Self {
        Self {
            config: model.config.clone(),
            epoch,
            provenance,
            tensors: model
                .params()
                .into_iter()
                .map(|(_, p)| (p.name.clone(), p.shape.clone(), p.value.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Architecture digest the parameters were produced for.
    pub fn config_hash(&self) -> String {
        self.config.architecture_hash()
    }

    /// Rebuilds the model. With `expected`, the architecture must match it.
    pub fn to_model(&self, expected: Option<&CodecConfig>) -> Result<CodecModel, CheckpointError> {
        if let Some(cfg) = expected {
            let want = cfg.architecture_hash();
            if want != self.config_hash() {
                return Err(CheckpointError::HashMismatch {
                    expected: want,
                    found: self.config_hash(),
                });
            }
        }
        let mut model = CodecModel::new(self.config.clone())?;
        let params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for ((_, p), (name, shape, value)) in params.into_iter().zip(&self.tensors) {
            if &p.name != name || &p.shape != shape {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {name} {shape:?} does not match {} {:?}",
                    p.name, p.shape
                )));
            }
            p.value.clone_from(value);
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash(),
            config: self.config.clone(),
            epoch: self.epoch,
            provenance: self.provenance.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let push = |out: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for (_, _, v) in &self.tensors {
            push(&mut out, v);
        }
        if let Some(opt) = &self.optimizer {
            for m in &opt.moments {
                push(&mut out, &m.m);
            }
            for m in &opt.moments {
                push(&mut out, &m.v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        let short = |_| CheckpointError::Corrupt("truncated header".into());
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.to_owned() });
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(short)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                path: path.to_owned(),
                found: version,
            });
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(short)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| CheckpointError::Corrupt("header length".into()))?;
        if r.len() < len {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        if header.config_hash != header.config.architecture_hash() {
            return Err(CheckpointError::HashMismatch {
                expected: header.config.architecture_hash(),
                found: header.config_hash,
            });
        }
        let mut take = |n: usize| -> Result<Vec<f32>, CheckpointError> {
            if r.len() < 4 * n {
                return Err(CheckpointError::Corrupt("truncated tensor data".into()));
            }
            let (head, rest) = r.split_at(4 * n);
            r = rest;
            Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.shape.iter().product();
            tensors.push((t.name, t.shape, take(n)?));
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let sizes: Vec<usize> = tensors.iter().map(|(_, _, v)| v.len()).collect();
                let ms = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                let vs = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                Some(Adam {
                    lr: o.lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    moments: ms.into_iter().zip(vs).map(|(m, v)| Moments { m, v }).collect(),
                })
            }
        };
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            provenance: header.provenance,
            tensors,
            optimizer,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CodecConfig {
        CodecConfig {
            channels: 3,
            latent_channels: 4,
            hyper_channels: 2,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let model = CodecModel::new(small()).unwrap();
        let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
        let mut opt = Adam::new(1e-4, &sizes);
        opt.step = 3;
        opt.moments[1].m[0] = 0.25;
        let mut prov = Provenance::new();
        prov.insert("weights".into(), "1,0,0".into());
        let ck = Checkpoint::from_model(&model, 2, prov, Some(&opt));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let path2 = dir.path().join("b.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        assert_eq!(loaded.to_model(Some(&small())).unwrap(), model);
    }

    #[test]
    fn refuses_other_architectures() {
        let ck = Checkpoint::from_model(&CodecModel::new(small()).unwrap(), 0, Provenance::new(), None);
        let other = CodecConfig { channels: 5, ..small() };
        assert!(matches!(ck.to_model(Some(&other)), Err(CheckpointError::HashMismatch { .. })));
        // Seed and trained lambda are not architecture.
        let reseeded = CodecConfig { seed: 9, ..small() };
        assert!(ck.to_model(Some(&reseeded)).is_ok());
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x");
        assert!(matches!(
            Checkpoint::from_bytes(b"nonsense-bytes-here", p),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bytes = Checkpoint::from_model(&CodecModel::new(small()).unwrap(), 0, Provenance::new(), None)
            .to_bytes()
            .unwrap();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes, p), Err(CheckpointError::Corrupt(_))));
    }
}
