//! End-to-end runs on synthetic data: pretrain + fine-tune versus
//! fine-tune only, the temperature/batch-size grid, and the data-fraction sweep.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::AugmentationConfig;
use crate::config::{self, KeyValueConfig};
use crate::datagen::{generate, split, SynthConfig};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport, Qrels, RunFile, DEFAULT_KS};
use crate::objectives::ContrastiveLossConfig;
use crate::session::{build_vocab_from_sessions, Session, Vocab};
use crate::training::{finetune, pretrain, score_sessions, NoObserver, Stage, StepLog, TrainConfig};

pub const TAU_GRID: [f64; 5] = [0.05, 0.1, 0.3, 0.5, 1.0];
pub const BATCH_GRID: [usize; 4] = [16, 32, 64, 128];
pub const FRACTION_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const EPOCH_GRID: [usize; 5] = [1, 2, 3, 4, 5];

/// Everything an end-to-end run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub split_ratios: Vec<f64>,
    pub min_freq: usize,
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationConfig,
    pub loss: ContrastiveLossConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut encoder = EncoderConfig::desk(0);
        encoder.d_model = 32;
        encoder.n_heads = 4;
        encoder.d_ff = 64;
        encoder.max_len = 64;
        Self {
            synth: SynthConfig::default(),
            split_ratios: vec![0.8, 0.1, 0.1],
            min_freq: 1,
            encoder,
            augmentation: AugmentationConfig::default(),
            loss: ContrastiveLossConfig::default(),
            pretrain: TrainConfig {
                batch_size: 32,
                ..TrainConfig::pretrain()
            },
            finetune: TrainConfig::finetune(),
        }
    }
}

impl ExperimentConfig {
    /// A seconds-scale setup for smoke tests: 120 sessions, a 16-d single-layer
    /// encoder and one epoch per stage.
    pub fn tiny() -> Self {
        let mut cfg = Self::default();
        cfg.synth.session_count = 120;
        cfg.synth.n_intents = 6;
        cfg.synth.vocab_terms = 120;
        cfg.encoder.d_model = 16;
        cfg.encoder.n_layers = 1;
        cfg.encoder.n_heads = 2;
        cfg.encoder.d_ff = 32;
        cfg.pretrain.epochs = 1;
        cfg.pretrain.batch_size = 16;
        cfg.finetune.epochs = 1;
        cfg
    }

    /// Applies `key = value` pairs. Keys shared by both stages take a
    /// `pretrain.` or `finetune.` prefix; `seed` sets every seed at once.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            let pair = [(k.clone(), v.clone())];
            if let Some(rest) = k.strip_prefix("pretrain.") {
                config::apply_all(&mut [&mut self.pretrain], &[(rest.to_string(), v.clone())])?;
            } else if let Some(rest) = k.strip_prefix("finetune.") {
                config::apply_all(&mut [&mut self.finetune], &[(rest.to_string(), v.clone())])?;
            } else if let Some(rest) = k.strip_prefix("synth.") {
                config::apply_all(&mut [&mut self.synth], &[(rest.to_string(), v.clone())])?;
            } else if k == "seed" {
                let s: u64 = config::parse(k, v)?;
                self.set_seed(s);
            } else if k == "split_ratios" {
                self.split_ratios = config::parse_list(k, v)?;
            } else if k == "min_freq" {
                self.min_freq = config::parse(k, v)?;
            } else {
                config::apply_all(
                    &mut [&mut self.encoder, &mut self.augmentation, &mut self.loss, &mut self.synth],
                    &pair,
                )?;
            }
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("split_ratios".to_string(), config::show_list(&self.split_ratios)),
            ("min_freq".to_string(), self.min_freq.to_string()),
        ];
        out.extend(self.encoder.entries());
        out.extend(self.augmentation.entries());
        out.extend(self.loss.entries());
        for (prefix, entries) in [
            ("synth", self.synth.entries()),
            ("pretrain", self.pretrain.entries()),
            ("finetune", self.finetune.entries()),
        ] {
            out.extend(entries.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
        }
        out
    }
}

/// Train / validation / test sessions and the training vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
    pub vocab: Vocab,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    if cfg.split_ratios.len() != 3 {
        return Err(Error::Config("split_ratios needs train,validation,test".into()));
    }
    let corpus = generate(&cfg.synth)?;
    let mut parts = split(&corpus.sessions, &cfg.split_ratios, cfg.synth.seed)?.into_iter();
    let train = parts.next().expect("three parts");
    let validation = parts.next().expect("three parts");
    let test = parts.next().expect("three parts");
    let vocab = build_vocab_from_sessions(&train, cfg.min_freq)?;
    Ok(PreparedData {
        train,
        validation,
        test,
        vocab,
    })
}

/// Outcome of one pipeline run.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub pretrained: bool,
    /// Mean contrastive loss and accuracy over the last pretraining epoch.
    pub contrastive_loss: Option<f64>,
    pub contrastive_acc: Option<f64>,
    pub best_epoch: usize,
    pub test: MetricsReport,
    #[serde(skip)]
    pub run: RunFile,
    /// Wall-clock time; left out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

fn last_epoch_means(logs: &[StepLog]) -> (Option<f64>, Option<f64>) {
    let Some(last) = logs.last().map(|l| l.epoch) else { return (None, None) };
    let tail: Vec<&StepLog> = logs.iter().filter(|l| l.epoch == last).collect();
    let n = tail.len() as f64;
    let loss = tail.iter().map(|l| l.loss).sum::<f64>() / n;
    let acc = tail.iter().filter_map(|l| l.acc).sum::<f64>() / n;
    (Some(loss), Some(acc))
}

/// Initializes an encoder from the fine-tuning seed, optionally pretrains
/// it, fine-tunes with validation-based epoch selection, and scores the
/// test split.
pub fn run_pipeline(cfg: &ExperimentConfig, data: &PreparedData, with_pretraining: bool) -> Result<RunResult> {
    let start = Instant::now();
    let enc = EncoderConfig {
        vocab_size: data.vocab.len(),
        ..cfg.encoder.clone()
    };
    let mut params = EncoderParams::init(&enc, &mut ChaCha8Rng::seed_from_u64(cfg.finetune.seed))?;
    let (mut contrastive_loss, mut contrastive_acc) = (None, None);
    if with_pretraining {
        let train = TrainConfig {
            stage: Stage::Pretrain,
            ..cfg.pretrain.clone()
        };
        let out = pretrain(
            &data.train,
            &data.vocab,
            params,
            &cfg.augmentation,
            &cfg.loss,
            &train,
            &mut NoObserver,
        )?;
        (contrastive_loss, contrastive_acc) = last_epoch_means(&out.logs);
        params = out.params;
    }
    let train = TrainConfig {
        stage: Stage::Finetune,
        ..cfg.finetune.clone()
    };
    let out = finetune(&data.train, Some(&data.validation), &data.vocab, params, &train, &mut NoObserver)?;
    let run = RunFile::from_scores("coca", score_sessions(&out.params, &data.vocab, &data.test)?);
    let test = evaluate(&run, &Qrels::from_sessions(&data.test), &DEFAULT_KS)?;
    Ok(RunResult {
        pretrained: with_pretraining,
        contrastive_loss,
        contrastive_acc,
        best_epoch: out.best_epoch,
        test,
        run,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub coca_map: f64,
    pub finetune_only_map: f64,
    pub coca: RunResult,
    pub finetune_only: RunResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub seeds: Vec<SeedComparison>,
    pub mean_coca_map: f64,
    pub mean_finetune_only_map: f64,
    /// Mean MAP difference, COCA minus fine-tune only.
    pub mean_gain: f64,
}

/// Pretrain + fine-tune against fine-tune only, per seed, on the same data,
/// initialization and fine-tuning budget.
pub fn compare(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Comparison> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.set_seed(seed);
        let data = prepare_data(&c)?;
        let coca = run_pipeline(&c, &data, true)?;
        let base = run_pipeline(&c, &data, false)?;
        log::info!(
            "seed {seed}: coca MAP {:.4} ({:.0}s), finetune-only MAP {:.4} ({:.0}s)",
            coca.test.map,
            coca.seconds,
            base.test.map,
            base.seconds
        );
        rows.push(SeedComparison {
            seed,
            coca_map: coca.test.map,
            finetune_only_map: base.test.map,
            coca,
            finetune_only: base,
        });
    }
    let n = rows.len().max(1) as f64;
    let mean_coca_map = rows.iter().map(|r| r.coca_map).sum::<f64>() / n;
    let mean_finetune_only_map = rows.iter().map(|r| r.finetune_only_map).sum::<f64>() / n;
    Ok(Comparison {
        seeds: rows,
        mean_coca_map,
        mean_finetune_only_map,
        mean_gain: mean_coca_map - mean_finetune_only_map,
    })
}

/// One row of a sweep report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub tau: f64,
    pub batch_size: usize,
    pub data_fraction: f64,
    pub pretrain_epochs: usize,
    pub contrastive_loss: Option<f64>,
    pub contrastive_acc: Option<f64>,
    pub map: f64,
    pub mrr: f64,
    pub ndcg_1: f64,
    pub ndcg_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub kind: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        writeln!(
            out,
            "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "setting", "CE", "Acc", "MAP", "MRR", "NDCG@1", "NDCG@10"
        )
        .expect("String write");
        for r in &self.rows {
            writeln!(
                out,
                "{:<14} {:>8} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.setting,
                opt(r.contrastive_loss),
                opt(r.contrastive_acc),
                r.map,
                r.mrr,
                r.ndcg_1,
                r.ndcg_10
            )
            .expect("String write");
        }
        out
    }
}

fn sweep_row(setting: String, cfg: &ExperimentConfig, r: &RunResult) -> SweepRow {
    SweepRow {
        setting,
        tau: cfg.loss.tau,
        batch_size: cfg.pretrain.batch_size,
        data_fraction: cfg.pretrain.data_fraction,
        pretrain_epochs: cfg.pretrain.epochs,
        contrastive_loss: r.contrastive_loss,
        contrastive_acc: r.contrastive_acc,
        map: r.test.map,
        mrr: r.test.mrr,
        ndcg_1: r.test.ndcg_at(1).unwrap_or(0.0),
        ndcg_10: r.test.ndcg_at(10).unwrap_or(0.0),
    }
}

/// The temperature grid at the largest batch size followed by the
/// batch-size grid at τ = 0.1: nine rows.
pub fn hyperparameter_sweep(cfg: &ExperimentConfig, taus: &[f64], batches: &[usize]) -> Result<SweepReport> {
    let data = prepare_data(cfg)?;
    let fixed_batch = batches.iter().copied().max().unwrap_or(cfg.pretrain.batch_size);
    let mut rows = Vec::new();
    for &tau in taus {
        let mut c = cfg.clone();
        c.loss.tau = tau;
        c.pretrain.batch_size = fixed_batch;
        let r = run_pipeline(&c, &data, true)?;
        rows.push(sweep_row(format!("tau={tau}"), &c, &r));
    }
    for &b in batches {
        let mut c = cfg.clone();
        c.loss.tau = 0.1;
        c.pretrain.batch_size = b;
        let r = run_pipeline(&c, &data, true)?;
        rows.push(sweep_row(format!("batch={b}"), &c, &r));
    }
    Ok(SweepReport {
        kind: "hyperparameters".into(),
        rows,
    })
}

/// Contrastive pretraining on a seeded `f` share of the training sessions,
/// each followed by fine-tuning on all of them. The first row is the
/// fine-tune-only baseline.
pub fn data_fraction_sweep(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<SweepReport> {
    let data = prepare_data(cfg)?;
    let mut rows = vec![none_row(cfg, &data)?];
    for &f in fractions {
        let mut c = cfg.clone();
        c.pretrain.data_fraction = f;
        let r = run_pipeline(&c, &data, true)?;
        rows.push(sweep_row(format!("fraction={f}"), &c, &r));
    }
    Ok(SweepReport {
        kind: "data_fraction".into(),
        rows,
    })
}

fn none_row(cfg: &ExperimentConfig, data: &PreparedData) -> Result<SweepRow> {
    let base = run_pipeline(cfg, data, false)?;
    let mut row = sweep_row("none".into(), cfg, &base);
    row.data_fraction = 0.0;
    row.pretrain_epochs = 0;
    Ok(row)
}

/// Contrastive pretraining for each epoch count in `epochs`, then the usual
/// fine-tuning. The first row is the fine-tune-only baseline.
pub fn epoch_sweep(cfg: &ExperimentConfig, epochs: &[usize]) -> Result<SweepReport> {
    let data = prepare_data(cfg)?;
    let mut rows = vec![none_row(cfg, &data)?];
    for &e in epochs {
        let mut c = cfg.clone();
        c.pretrain.epochs = e;
        let r = run_pipeline(&c, &data, true)?;
        rows.push(sweep_row(format!("epochs={e}"), &c, &r));
    }
    Ok(SweepReport {
        kind: "epochs".into(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_reach_every_section() {
        let mut cfg = ExperimentConfig::tiny();
        let pairs: Vec<(String, String)> = [
            ("tau", "0.3"),
            ("gamma", "0.2"),
            ("d_model", "8"),
            ("pretrain.epochs", "2"),
            ("finetune.batch_size", "7"),
            ("synth.n_intents", "4"),
            ("min_freq", "2"),
            ("seed", "9"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        cfg.apply(&pairs).unwrap();
        assert_eq!(cfg.loss.tau, 0.3);
        assert_eq!(cfg.augmentation.gamma, 0.2);
        assert_eq!(cfg.encoder.d_model, 8);
        assert_eq!(cfg.pretrain.epochs, 2);
        assert_eq!(cfg.finetune.batch_size, 7);
        assert_eq!(cfg.synth.n_intents, 4);
        assert_eq!(cfg.min_freq, 2);
        assert_eq!((cfg.synth.seed, cfg.pretrain.seed, cfg.finetune.seed), (9, 9, 9));

        let mut back = ExperimentConfig::default();
        back.apply(&cfg.entries()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.apply(&[("nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn tiny_sweeps_have_expected_rows() {
        let cfg = ExperimentConfig::tiny();
        let report = hyperparameter_sweep(&cfg, &TAU_GRID, &BATCH_GRID).unwrap();
        assert_eq!(report.rows.len(), 9);
        assert_eq!(report.rows[0].batch_size, 128);
        assert_eq!(report.rows[5].tau, 0.1);
        assert!(report.to_table().lines().count() == 10);

        let report = data_fraction_sweep(&cfg, &[0.5, 1.0]).unwrap();
        let settings: Vec<&str> = report.rows.iter().map(|r| r.setting.as_str()).collect();
        assert_eq!(settings, ["none", "fraction=0.5", "fraction=1"]);
        assert!(report.rows[0].contrastive_loss.is_none());

        let report = epoch_sweep(&cfg, &[1]).unwrap();
        assert_eq!(report.rows[1].pretrain_epochs, 1);
    }

    #[test]
    fn comparison_shares_data_and_budget() {
        let c = compare(&ExperimentConfig::tiny(), &[3]).unwrap();
        let s = &c.seeds[0];
        assert_eq!(s.coca.test.evaluated, s.finetune_only.test.evaluated);
        assert!(s.coca.pretrained && !s.finetune_only.pretrained);
        assert!((c.mean_gain - (s.coca_map - s.finetune_only_map)).abs() < 1e-15);
        let json = serde_json::to_string(&c).unwrap();
        assert!(!json.contains("seconds"));
    }
}
