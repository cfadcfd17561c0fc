use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::session::Vocab;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: EncoderConfig,
    vocab: Vec<String>,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Encoder configuration, vocabulary and parameters in one JSON container.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub params: EncoderParams,
    /// Free-form provenance (stage, epoch, ...).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(vocab: Vocab, params: EncoderParams) -> Self {
        Self {
            vocab,
            params,
            meta: serde_json::Value::Null,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            config: self.params.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| TensorRecord {
                    name,
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {}",
                file.format_version
            )));
        }
        file.config.validate()?;
        let vocab = Vocab::from_token_list(file.vocab)?;
        if vocab.len() != file.config.vocab_size {
            return Err(Error::Data(format!(
                "vocabulary has {} tokens but config says {}",
                vocab.len(),
                file.config.vocab_size
            )));
        }
        let tensors = file
            .tensors
            .into_iter()
            .map(|t| {
                Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                    .map(|a| (t.name.clone(), a))
                    .map_err(|_| Error::Data(format!("tensor {} data does not match its shape", t.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = EncoderParams::from_tensors(&file.config, tensors)?;
        Ok(Self {
            vocab,
            params,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
