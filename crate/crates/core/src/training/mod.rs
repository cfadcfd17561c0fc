//! Stage-1 contrastive pretraining, stage-2 ranking fine-tuning, and scoring.

mod finetune;
mod optimizer;
mod pretrain;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use finetune::{finetune, predict, ranking_instances, score_sessions, FinetuneOutcome, RankingInstance};
pub use optimizer::{adamw_update, clip_global_norm, is_prefix_of, optimizer_step, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use pretrain::{pretrain, PretrainOutcome};

use crate::config::{self, KeyValueConfig};
use crate::encoder::{Checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::session::{Session, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Sessions per contrastive batch, or ranking instances per fine-tuning batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub data_fraction: f64,
    pub grad_clip: Option<f64>,
    /// Parameter tensors (names or name prefixes such as `layers.0`) held
    /// fixed during this stage.
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 4,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.01,
            seed: 0,
            data_fraction: 1.0,
            grad_clip: None,
            frozen: vec!["pos_emb".into()],
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::LinearDecay,
            frozen: Vec::new(),
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        let min_batch = if self.stage == Stage::Pretrain { 2 } else { 1 };
        if self.batch_size < min_batch {
            return bad(format!("batch_size {} must be >= {min_batch} for {}", self.batch_size, self.stage));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction {} outside (0, 1]", self.data_fraction));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be > 0"));
            }
        }
        Ok(())
    }

    /// Checks that every frozen entry names at least one tensor of `params`.
    pub fn check_frozen(&self, params: &EncoderParams) -> Result<()> {
        let names = params.tensor_names();
        for f in &self.frozen {
            if !names.iter().any(|n| is_prefix_of(f, n)) {
                return Err(Error::Config(format!("frozen entry {f:?} matches no parameter tensor")));
            }
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` out of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::LinearDecay => self.learning_rate * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

impl KeyValueConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "stage" => {
                self.stage = match value {
                    "pretrain" => Stage::Pretrain,
                    "finetune" => Stage::Finetune,
                    _ => return Err(Error::Config(format!("stage must be pretrain or finetune, got {value:?}"))),
                }
            }
            "epochs" => self.epochs = config::parse(key, value)?,
            "batch_size" => self.batch_size = config::parse(key, value)?,
            "learning_rate" => self.learning_rate = config::parse(key, value)?,
            "lr_schedule" => {
                self.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "linear_decay" => LrSchedule::LinearDecay,
                    _ => {
                        return Err(Error::Config(format!(
                            "lr_schedule must be constant or linear_decay, got {value:?}"
                        )))
                    }
                }
            }
            "weight_decay" => self.weight_decay = config::parse(key, value)?,
            "seed" => self.seed = config::parse(key, value)?,
            "data_fraction" => self.data_fraction = config::parse(key, value)?,
            "grad_clip" => self.grad_clip = config::parse_optional(key, value)?,
            "frozen" => {
                self.frozen = match value.trim() {
                    "" | "none" => Vec::new(),
                    v => config::parse_list(key, v)?,
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let schedule = match self.lr_schedule {
            LrSchedule::Constant => "constant",
            LrSchedule::LinearDecay => "linear_decay",
        };
        vec![
            ("stage".into(), self.stage.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("lr_schedule".into(), schedule.into()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("data_fraction".into(), self.data_fraction.to_string()),
            ("grad_clip".into(), config::show_optional(&self.grad_clip)),
            (
                "frozen".into(),
                if self.frozen.is_empty() { "none".into() } else { config::show_list(&self.frozen) },
            ),
        ]
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

/// Hooks called during training; used for logging and checkpointing.
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    /// Called after each epoch with the parameters at that point and, when a
    /// validation set was supplied, their validation metrics.
    fn on_epoch(&mut self, _stage: Stage, _epoch: usize, _params: &EncoderParams, _val: Option<&MetricsReport>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Writes `train_log.jsonl` and one checkpoint per epoch into a directory,
/// and records which epoch had the best validation MAP in `best_epoch.json`.
pub struct CheckpointDir {
    pub dir: PathBuf,
    pub vocab: Vocab,
    pub meta: serde_json::Value,
    log: File,
    best: Option<(usize, f64)>,
}

impl CheckpointDir {
    pub fn create(dir: &Path, vocab: Vocab, meta: serde_json::Value) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("train_log.jsonl");
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            vocab,
            meta,
            log,
            best: None,
        })
    }

    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint-epoch{epoch}.json"))
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

impl TrainObserver for CheckpointDir {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        let line = serde_json::to_string(log)?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("train_log.jsonl"), e))
    }

    fn on_epoch(&mut self, stage: Stage, epoch: usize, params: &EncoderParams, val: Option<&MetricsReport>) -> Result<()> {
        let mut meta = self.meta.clone();
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("stage".into(), stage.to_string().into());
            m.insert("epoch".into(), epoch.into());
            if let Some(v) = val {
                m.insert("validation".into(), v.summary_json());
            }
        }
        let ck = Checkpoint {
            vocab: self.vocab.clone(),
            params: params.clone(),
            meta,
        };
        ck.save(&self.epoch_path(epoch))?;
        if let Some(v) = val {
            if self.best.is_none_or(|(_, m)| v.map > m) {
                self.best = Some((epoch, v.map));
                let path = self.dir.join("best_epoch.json");
                let body = serde_json::json!({
                    "epoch": epoch,
                    "map": v.map,
                    "checkpoint": self.epoch_path(epoch).file_name().and_then(|s| s.to_str()),
                });
                fs::write(&path, body.to_string()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

/// Seeded shuffle, then the first `⌊fraction·n⌋` sessions.
pub fn subsample(sessions: &[Session], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<Session> {
    let n = sessions.len();
    let keep = if fraction >= 1.0 {
        n
    } else {
        (fraction * n as f64 + 1e-9).floor() as usize
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(keep);
    idx.into_iter().map(|i| sessions[i].clone()).collect()
}

#[cfg(test)]
mod tests;
