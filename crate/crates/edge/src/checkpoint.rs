//! Versioned binary checkpoint container: a magic string, a JSON config
//! blob, the vocabulary, and a named tensor table stored as 32-bit floats.
//!
//! Tensor values are snapped to `f32` when a checkpoint is built from a
//! model, so save/load round-trips are bit-exact and generation from a
//! reloaded checkpoint matches generation from the in-memory one.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::InferenceConfig;
use crate::corpus::LengthCaps;
use crate::graph::ParamSet;
use crate::model::{Model, ModelConfig, ModelError};
use crate::text::Vocabulary;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"EDGECKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint config is invalid: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to run the model again: architecture, input-processing
/// settings, and the training and decoding hyperparameters used.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub caps: LengthCaps,
    pub lowercase: bool,
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub epoch: usize,
    pub val_ppl: f64,
    /// Vocabulary tokens from id 3 onward (specials implicit).
    pub vocab_tokens: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot a model. Values are quantized to `f32` here, once.
    pub fn from_model(
        model: &Model,
        vocab: &Vocabulary,
        config: CheckpointConfig,
        epoch: usize,
        val_ppl: f64,
    ) -> Checkpoint {
        let tensors = model
            .params
            .ids()
            .map(|id| {
                let v = model.params.value(id);
                NamedTensor {
                    name: model.params.name(id).to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                    trainable: model.params.is_trainable(id),
                    data: v.iter().map(|&x| x as f32).collect(),
                }
            })
            .collect();
        Checkpoint {
            config,
            epoch,
            val_ppl,
            vocab_tokens: vocab.tokens_after_specials().to_vec(),
            tensors,
        }
    }

    /// Rebuild the model and vocabulary from the stored tensors.
    pub fn restore(&self) -> Result<(Model, Vocabulary), CheckpointError> {
        let mut params = ParamSet::new();
        for t in &self.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {} has {} values for shape {}×{}",
                    t.name,
                    t.data.len(),
                    t.rows,
                    t.cols
                )));
            }
            let values = ndarray::Array2::from_shape_vec(
                (t.rows, t.cols),
                t.data.iter().map(|&x| x as f64).collect(),
            )
            .expect("length checked above");
            params.add(&t.name, values, t.trainable);
        }
        let model = Model::from_param_set(params, self.config.model)?;
        let vocab = Vocabulary::from_tokens(&self.vocab_tokens);
        if vocab.len() != model.vocab_size {
            return Err(CheckpointError::Corrupt(format!(
                "vocabulary has {} entries but the embedding has {} rows",
                vocab.len(),
                model.vocab_size
            )));
        }
        Ok((model, vocab))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let result: std::io::Result<()> = (|| {
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            let config =
                serde_json::to_vec(&self.config).expect("config serialization cannot fail");
            write_bytes(&mut w, &config)?;
            w.write_all(&(self.epoch as u32).to_le_bytes())?;
            w.write_all(&self.val_ppl.to_le_bytes())?;
            w.write_all(&(self.vocab_tokens.len() as u32).to_le_bytes())?;
            for token in &self.vocab_tokens {
                write_bytes(&mut w, token.as_bytes())?;
            }
            w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
            for t in &self.tensors {
                write_bytes(&mut w, t.name.as_bytes())?;
                w.write_all(&(t.rows as u32).to_le_bytes())?;
                w.write_all(&(t.cols as u32).to_le_bytes())?;
                w.write_all(&[t.trainable as u8])?;
                for &x in &t.data {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            w.flush()
        })();
        result.map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let file = File::open(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut r = BufReader::new(file);
        let corrupt = |what: &str| CheckpointError::Corrupt(what.to_string());

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("magic"))?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r).map_err(|_| corrupt("version"))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let config_bytes = read_bytes(&mut r).map_err(|_| corrupt("config"))?;
        let config: CheckpointConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        let epoch = read_u32(&mut r).map_err(|_| corrupt("epoch"))? as usize;
        let mut ppl_bytes = [0u8; 8];
        r.read_exact(&mut ppl_bytes)
            .map_err(|_| corrupt("perplexity"))?;
        let val_ppl = f64::from_le_bytes(ppl_bytes);

        let vocab_count = read_u32(&mut r).map_err(|_| corrupt("vocabulary count"))?;
        let mut vocab_tokens = Vec::with_capacity(vocab_count as usize);
        for _ in 0..vocab_count {
            let bytes = read_bytes(&mut r).map_err(|_| corrupt("vocabulary token"))?;
            vocab_tokens.push(
                String::from_utf8(bytes).map_err(|_| corrupt("vocabulary token encoding"))?,
            );
        }

        let tensor_count = read_u32(&mut r).map_err(|_| corrupt("tensor count"))?;
        let mut tensors = Vec::with_capacity(tensor_count as usize);
        for _ in 0..tensor_count {
            let name_bytes = read_bytes(&mut r).map_err(|_| corrupt("tensor name"))?;
            let name =
                String::from_utf8(name_bytes).map_err(|_| corrupt("tensor name encoding"))?;
            let rows = read_u32(&mut r).map_err(|_| corrupt("tensor rows"))? as usize;
            let cols = read_u32(&mut r).map_err(|_| corrupt("tensor cols"))? as usize;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)
                .map_err(|_| corrupt("tensor flags"))?;
            let mut data = vec![0f32; rows * cols];
            let mut buf = [0u8; 4];
            for x in data.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| corrupt("tensor values"))?;
                *x = f32::from_le_bytes(buf);
            }
            tensors.push(NamedTensor {
                name,
                rows,
                cols,
                trainable: flag[0] != 0,
                data,
            });
        }
        // trailing garbage counts as corruption
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|_| corrupt("trailer"))? != 0 {
            return Err(corrupt("trailing data"));
        }
        Ok(Checkpoint {
            config,
            epoch,
            val_ppl,
            vocab_tokens,
            tensors,
        })
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
