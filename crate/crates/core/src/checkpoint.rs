//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "TRJFCKPT" | u32 version | u64 header length | JSON header
//! u32 array count | per array: u32 name length, name, u32 rank, u64 dims.., f64 data..
//! SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::geo::NormalizationParams;
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{AdamState, HistoryEntry, TrainConfig, Trainer};
use crate::transformer::TrajectoryModel;

pub const MAGIC: &[u8; 8] = b"TRJFCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint holds {found} weights, requested {expected}")]
    Scalar {
        found: String,
        expected: &'static str,
    },
    #[error("checkpoint model config does not match: {0}")]
    ConfigMismatch(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            return Err(corrupt("rng seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| corrupt("rng seed is not hex"))?;
        }
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| corrupt("rng word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    scalar: String,
    model: ModelConfig,
    normalization: NormalizationParams,
    train: Option<TrainConfig>,
    rng: Option<RngState>,
    adam_step: Option<u64>,
    epoch: usize,
    batch_in_epoch: usize,
    history: Vec<HistoryEntry>,
}

/// Everything needed to evaluate a model or resume training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model_config: ModelConfig,
    pub normalization: NormalizationParams,
    pub params: ModelParams<Tensor<T>>,
    pub train_config: Option<TrainConfig>,
    pub adam: Option<AdamState<T>>,
    pub rng: Option<RngState>,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub history: Vec<HistoryEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Weights only, for evaluation.
    pub fn from_model(model: &TrajectoryModel<T>, normalization: NormalizationParams) -> Self {
        Self {
            model_config: model.config().clone(),
            normalization,
            params: model.params().clone(),
            train_config: None,
            adam: None,
            rng: None,
            epoch: 0,
            batch_in_epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn from_trainer(t: &Trainer<T>) -> Self {
        Self {
            model_config: t.model.config().clone(),
            normalization: t.norm,
            params: t.model.params().clone(),
            train_config: Some(t.config.clone()),
            adam: Some(t.adam.clone()),
            rng: Some(RngState::capture(&t.rng)),
            epoch: t.epoch,
            batch_in_epoch: t.batch_in_epoch,
            history: t.history.clone(),
        }
    }

    pub fn model(&self) -> Result<TrajectoryModel<T>> {
        TrajectoryModel::from_params(self.model_config.clone(), self.params.clone())
            .map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))
    }

    /// Rebuilds the trainer exactly where it stopped.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let model = self.model()?;
        let config = self
            .train_config
            .ok_or_else(|| corrupt("checkpoint has no training state"))?;
        let mut t = Trainer::with_model(model, config, self.normalization);
        t.adam = self
            .adam
            .ok_or_else(|| corrupt("checkpoint has no optimizer state"))?;
        if let Some(rng) = &self.rng {
            t.rng = rng.restore()?;
        }
        t.epoch = self.epoch;
        t.batch_in_epoch = self.batch_in_epoch;
        t.history = self.history;
        Ok(t)
    }

    /// Errors unless the stored model config equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model_config == expected {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch(format!(
                "stored {:?}, requested {:?}",
                self.model_config, expected
            )))
        }
    }

    fn header(&self) -> Header {
        Header {
            scalar: T::NAME.to_string(),
            model: self.model_config.clone(),
            normalization: self.normalization,
            train: self.train_config.clone(),
            rng: self.rng.clone(),
            adam_step: self.adam.as_ref().map(|a| a.step),
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            history: self.history.clone(),
        }
    }

    fn arrays(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.params.for_each(|n, t| out.push((n.to_string(), t)));
        if let Some(adam) = &self.adam {
            adam.m.for_each(|n, t| out.push((format!("adam.m.{n}"), t)));
            adam.v.for_each(|n, t| out.push((format!("adam.v.{n}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let arrays = self.arrays();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let mut r = Reader {
            bytes: &bytes[..bytes.len() - DIGEST_LEN],
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let header_len = r.len()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| corrupt(format!("header: {e}")))?;
        if header.scalar != T::NAME {
            return Err(CheckpointError::Scalar {
                found: header.scalar,
                expected: T::NAME,
            });
        }
        let count = r.u32()? as usize;
        let mut arrays = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("array name"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("array size"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("array {name}: {e}")))?;
            arrays.insert(name, t);
        }
        if r.pos != r.bytes.len() {
            return Err(corrupt("trailing bytes after arrays"));
        }

        let template = ModelParams::<Tensor<T>>::init(
            &header.model,
            &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        let mut take = |prefix: &str| {
            template.try_map(&mut |n, expected: &Tensor<T>| {
                let key = format!("{prefix}{n}");
                let t = arrays
                    .remove(&key)
                    .ok_or_else(|| corrupt(format!("missing array {key}")))?;
                if t.shape() != expected.shape() {
                    return Err(CheckpointError::ConfigMismatch(format!(
                        "{key} has shape {:?}, config implies {:?}",
                        t.shape(),
                        expected.shape()
                    )));
                }
                Ok(t)
            })
        };
        let params = take("")?;
        let adam = match header.adam_step {
            Some(step) => Some(AdamState {
                m: take("adam.m.")?,
                v: take("adam.v.")?,
                step,
            }),
            None => None,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(corrupt(format!("unexpected array {extra}")));
        }
        Ok(Self {
            model_config: header.model,
            normalization: header.normalization,
            params,
            train_config: header.train,
            adam,
            rng: header.rng,
            epoch: header.epoch,
            batch_in_epoch: header.batch_in_epoch,
            history: header.history,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| corrupt("length overflows usize"))
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
