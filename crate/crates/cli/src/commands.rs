use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use coca_core::config::{self, read_key_values, KeyValueConfig};
use coca_core::datagen::{generate, ingest_aol, oracle_run, random_run, split, IngestFormat};
use coca_core::encoder::{grad_check, Checkpoint, EncoderConfig, EncoderParams, GRAD_CHECK_INIT_STD};
use coca_core::evaluation::{breakdown, evaluate, query_meta, Qrels, RunFile, DEFAULT_KS, DEFAULT_TAG};
use coca_core::experiment::{
    compare, data_fraction_sweep, epoch_sweep, hyperparameter_sweep, prepare_data, ExperimentConfig, BATCH_GRID,
    EPOCH_GRID, FRACTION_GRID, TAU_GRID,
};
use coca_core::session::{build_vocab_from_sessions, read_sessions, write_sessions, Session, Vocab};
use coca_core::training::{finetune, predict, pretrain, CheckpointDir, Stage, StepLog, TrainConfig};
use coca_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::args::{override_pairs, Command, Common, SweepKind};
use crate::output::{read_manifest, resolve_out, Manifest, OutputDir};

/// Keys of a training stage that may be given without a stage prefix when
/// the command runs only that stage.
const STAGE_KEYS: [&str; 8] = [
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_schedule",
    "weight_decay",
    "data_fraction",
    "grad_clip",
    "frozen",
];

/// Config pairs (file first, then flags) and input paths, including any
/// inputs recorded in a manifest passed as `--config`.
struct Settings {
    pairs: Vec<(String, String)>,
    saved_inputs: BTreeMap<String, PathBuf>,
    inputs: BTreeMap<String, String>,
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let (mut pairs, saved_inputs) = match &common.config {
            None => (Vec::new(), BTreeMap::new()),
            Some(path) => {
                require_file(path, "config")?;
                if path.extension().is_some_and(|e| e == "json") {
                    let saved = read_manifest(path)?;
                    (saved.config, saved.inputs)
                } else {
                    (read_key_values(path)?, BTreeMap::new())
                }
            }
        };
        pairs.extend(override_pairs(&common.overrides)?);
        Ok(Self {
            pairs,
            saved_inputs,
            inputs: BTreeMap::new(),
        })
    }

    /// Removes the last value of a command-level key from the pairs.
    fn take(&mut self, key: &str) -> Option<String> {
        let value = self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        self.pairs.retain(|(k, _)| k != key);
        value
    }

    fn input(&mut self, name: &str, flag: &Option<PathBuf>) -> Result<Option<PathBuf>> {
        let path = flag.clone().or_else(|| self.saved_inputs.get(name).cloned());
        if let Some(p) = &path {
            require_file(p, name)?;
            self.inputs.insert(name.to_string(), p.display().to_string());
        }
        Ok(path)
    }

    fn required(&mut self, name: &str, flag: &Option<PathBuf>) -> Result<PathBuf> {
        self.input(name, flag)?
            .ok_or_else(|| Error::Config(format!("missing --{name}")))
    }

    fn experiment(&self, base: ExperimentConfig, stage: Option<Stage>) -> Result<ExperimentConfig> {
        let prefix = match stage {
            Some(Stage::Pretrain) => Some("pretrain."),
            Some(Stage::Finetune) => Some("finetune."),
            None => None,
        };
        let pairs: Vec<(String, String)> = self
            .pairs
            .iter()
            .map(|(k, v)| match prefix {
                Some(p) if STAGE_KEYS.contains(&k.as_str()) => (format!("{p}{k}"), v.clone()),
                _ => (k.clone(), v.clone()),
            })
            .collect();
        let mut cfg = base;
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    fn reject_leftovers(&self) -> Result<()> {
        match self.pairs.first() {
            Some((k, _)) => Err(Error::Config(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} not found", path.display())))
    }
}

fn manifest(command: &Command, seed: u64, config: Vec<(String, String)>, settings: &Settings) -> Manifest {
    Manifest {
        command: command.name().to_string(),
        seed,
        config: config.into_iter().collect(),
        inputs: settings.inputs.clone(),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Runs one command and returns the output directory it committed.
pub fn run(command: &Command) -> Result<PathBuf> {
    let common = command.common();
    let mut settings = Settings::load(common)?;
    let target = resolve_out(common.out.as_deref(), command.name());
    // Fail on an existing directory before any work is done.
    let mut out = OutputDir::create(target, common.force)?;
    let (seed, config) = match command {
        Command::GenData { .. } => gen_data(&mut settings, &mut out)?,
        Command::Ingest { input, format, .. } => ingest(&mut settings, &mut out, input, format)?,
        Command::BuildVocab { sessions, .. } => build_vocab(&mut settings, &mut out, sessions)?,
        Command::Pretrain {
            sessions, vocab, init, ..
        } => run_pretrain(&mut settings, &mut out, sessions, vocab, init)?,
        Command::Finetune {
            sessions,
            validation,
            vocab,
            init,
            ..
        } => run_finetune(&mut settings, &mut out, sessions, validation, vocab, init)?,
        Command::Predict {
            checkpoint, sessions, tag, ..
        } => run_predict(&mut settings, &mut out, checkpoint, sessions, tag)?,
        Command::Evaluate { run, qrels, sessions, .. } => run_evaluate(&mut settings, &mut out, run, qrels, sessions)?,
        Command::Sweep {
            kind,
            taus,
            batches,
            fractions,
            epoch_grid,
            seeds,
            tiny,
            ..
        } => {
            let kind = match kind {
                Some(k) => *k,
                None => match settings.take("sweep.kind") {
                    Some(v) => SweepKind::from_str(&v, true).map_err(|e| Error::Config(format!("sweep.kind: {e}")))?,
                    None => SweepKind::Hyperparameters,
                },
            };
            let grids = Grids {
                taus: grid(&mut settings, "sweep.taus", taus, &TAU_GRID)?,
                batches: grid(&mut settings, "sweep.batches", batches, &BATCH_GRID)?,
                fractions: grid(&mut settings, "sweep.fractions", fractions, &FRACTION_GRID)?,
                epochs: grid(&mut settings, "sweep.epochs", epoch_grid, &EPOCH_GRID)?,
                seeds: grid(&mut settings, "sweep.seeds", seeds, &[0, 1, 2])?,
            };
            run_sweep(&mut settings, &mut out, kind, &grids, *tiny)?
        }
        Command::GradCheck { seeds, vocab_size, .. } => {
            let seeds = grid(&mut settings, "seeds", seeds, &[0, 1, 2, 3, 4])?;
            let vocab_size = match (vocab_size, settings.take("vocab_size")) {
                (Some(v), _) => *v,
                (None, Some(v)) => config::parse("vocab_size", &v)?,
                (None, None) => 20,
            };
            let (config, failed) = run_grad_check(&mut settings, &mut out, &seeds, vocab_size)?;
            let dir = out.commit(manifest(command, seeds[0], config, &settings))?;
            if let Some(msg) = failed {
                return Err(Error::Numerical(msg));
            }
            return Ok(dir);
        }
    };
    out.commit(manifest(command, seed, config, &settings))
}

type Recorded = (u64, Vec<(String, String)>);

/// A list from its flag, else from the settings, else the default.
fn grid<T: Clone + std::str::FromStr>(settings: &mut Settings, key: &str, flag: &Option<Vec<T>>, default: &[T]) -> Result<Vec<T>> {
    let from_settings = settings.take(key);
    match (flag, from_settings) {
        (Some(v), _) => Ok(v.clone()),
        (None, Some(v)) => config::parse_list(key, &v),
        (None, None) => Ok(default.to_vec()),
    }
}

fn gen_data(settings: &mut Settings, out: &mut OutputDir) -> Result<Recorded> {
    let cfg = settings.experiment(ExperimentConfig::default(), None)?;
    let corpus = generate(&cfg.synth)?;
    let parts = split(&corpus.sessions, &cfg.split_ratios, cfg.synth.seed)?;
    if parts.len() != 3 {
        return Err(Error::Config("split_ratios needs train,validation,test".into()));
    }
    write_sessions(&out.file("sessions.jsonl"), &corpus.sessions)?;
    for (name, part) in ["train", "validation", "test"].iter().zip(&parts) {
        write_sessions(&out.file(&format!("{name}.jsonl")), part)?;
        out.write(&format!("{name}.qrels"), &Qrels::from_sessions(part).to_trec_string())?;
    }
    let qrels = Qrels::from_sessions(&corpus.sessions);
    let random = evaluate(&random_run(&corpus.sessions, cfg.synth.seed), &qrels, &DEFAULT_KS)?;
    let oracle = evaluate(&oracle_run(&corpus), &qrels, &DEFAULT_KS)?;
    let queries: usize = corpus.sessions.iter().map(Session::len).sum();
    let report = json!({
        "sessions": corpus.sessions.len(),
        "queries": queries,
        "mean_session_len": queries as f64 / corpus.sessions.len() as f64,
        "train": parts[0].len(),
        "validation": parts[1].len(),
        "test": parts[2].len(),
        "random_mrr": random.mrr,
        "oracle_map": oracle.map,
    });
    let mut table = String::new();
    for (k, v) in report.as_object().expect("object") {
        writeln!(table, "{k:<18} {v}").expect("String write");
    }
    out.write_report("data_report", &report, &table)?;
    let mut recorded = cfg.synth.entries().into_iter().map(|(k, v)| (format!("synth.{k}"), v)).collect::<Vec<_>>();
    recorded.push(("split_ratios".into(), config::show_list(&cfg.split_ratios)));
    Ok((cfg.synth.seed, recorded))
}

fn ingest(settings: &mut Settings, out: &mut OutputDir, input: &Option<PathBuf>, format: &Option<String>) -> Result<Recorded> {
    let path = settings.required("input", input)?;
    let descriptor = format.clone().or_else(|| settings.take("format"));
    settings.reject_leftovers()?;
    let fmt = match &descriptor {
        Some(d) => IngestFormat::parse(d)?,
        None => IngestFormat::default(),
    };
    let (sessions, report) = ingest_aol(&path, &fmt)?;
    write_sessions(&out.file("sessions.jsonl"), &sessions)?;
    let value = to_value(&report)?;
    let table = format!(
        "rows             {}\nsessions         {}\nqueries          {}\ndropped_queries  {}\n",
        report.rows, report.sessions, report.queries, report.dropped_queries
    );
    out.write_report("ingest_report", &value, &table)?;
    let recorded = descriptor.map(|d| vec![("format".to_string(), d)]).unwrap_or_default();
    Ok((0, recorded))
}

fn build_vocab(settings: &mut Settings, out: &mut OutputDir, sessions: &Option<PathBuf>) -> Result<Recorded> {
    let path = settings.required("sessions", sessions)?;
    let cfg = settings.experiment(ExperimentConfig::default(), None)?;
    let sessions = read_sessions(&path)?;
    let vocab = build_vocab_from_sessions(&sessions, cfg.min_freq)?;
    vocab.write(&out.file("vocab.txt"))?;
    let report = json!({"size": vocab.len(), "min_freq": cfg.min_freq, "sessions": sessions.len()});
    let table = format!("size      {}\nmin_freq  {}\nsessions  {}\n", vocab.len(), cfg.min_freq, sessions.len());
    out.write_report("vocab_report", &report, &table)?;
    Ok((0, vec![("min_freq".into(), cfg.min_freq.to_string())]))
}

/// Vocabulary for a training command: the checkpoint's when starting from
/// one, else the given file, else built from the training sessions.
fn training_vocab(
    settings: &mut Settings,
    vocab_flag: &Option<PathBuf>,
    init: Option<&Checkpoint>,
    sessions: &[Session],
    min_freq: usize,
) -> Result<Vocab> {
    let file = settings.input("vocab", vocab_flag)?.map(|p| Vocab::read(&p)).transpose()?;
    match (init, file) {
        (Some(ck), Some(v)) if v != ck.vocab => {
            Err(Error::Config("--vocab differs from the vocabulary stored in --init".into()))
        }
        (Some(ck), _) => Ok(ck.vocab.clone()),
        (None, Some(v)) => Ok(v),
        (None, None) => build_vocab_from_sessions(sessions, min_freq),
    }
}

fn initial_params(cfg: &ExperimentConfig, vocab: &Vocab, init: Option<Checkpoint>, seed: u64) -> Result<EncoderParams> {
    match init {
        Some(ck) => {
            let mut params = ck.params;
            params.config.dropout_rate = cfg.encoder.dropout_rate;
            params.config.validate()?;
            Ok(params)
        }
        None => {
            let enc = EncoderConfig {
                vocab_size: vocab.len(),
                ..cfg.encoder.clone()
            };
            EncoderParams::init(&enc, &mut ChaCha8Rng::seed_from_u64(seed))
        }
    }
}

fn load_init(settings: &mut Settings, init: &Option<PathBuf>) -> Result<Option<Checkpoint>> {
    settings.input("init", init)?.map(|p| Checkpoint::load(&p)).transpose()
}

fn epoch_table(logs: &[StepLog], extra: impl Fn(usize) -> String, extra_head: &str) -> (Value, String) {
    let mut rows = Vec::new();
    let mut table = format!("{:>5} {:>6} {:>10} {:>8}{extra_head}\n", "epoch", "steps", "loss", "acc");
    let last = logs.last().map_or(0, |l| l.epoch);
    for e in 1..=last {
        let ep: Vec<&StepLog> = logs.iter().filter(|l| l.epoch == e).collect();
        let n = ep.len().max(1) as f64;
        let loss = ep.iter().map(|l| l.loss).sum::<f64>() / n;
        let acc = ep.iter().all(|l| l.acc.is_some()).then(|| ep.iter().filter_map(|l| l.acc).sum::<f64>() / n);
        let acc_s = acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        writeln!(table, "{e:>5} {:>6} {loss:>10.4} {acc_s:>8}{}", ep.len(), extra(e)).expect("String write");
        rows.push(json!({"epoch": e, "steps": ep.len(), "loss": loss, "acc": acc}));
    }
    (Value::Array(rows), table)
}

fn run_pretrain(
    settings: &mut Settings,
    out: &mut OutputDir,
    sessions: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
    init: &Option<PathBuf>,
) -> Result<Recorded> {
    let path = settings.required("sessions", sessions)?;
    let cfg = settings.experiment(ExperimentConfig::default(), Some(Stage::Pretrain))?;
    let train = TrainConfig {
        stage: Stage::Pretrain,
        ..cfg.pretrain.clone()
    };
    let sessions = read_sessions(&path)?;
    let init = load_init(settings, init)?;
    let vocab = training_vocab(settings, vocab, init.as_ref(), &sessions, cfg.min_freq)?;
    let params = initial_params(&cfg, &vocab, init, train.seed)?;
    let meta = json!({"command": "pretrain"});
    let mut observer = CheckpointDir::create(out.stage_path(), vocab.clone(), meta.clone())?;
    let outcome = pretrain(&sessions, &vocab, params, &cfg.augmentation, &cfg.loss, &train, &mut observer)?;
    drop(observer);
    Checkpoint {
        vocab: vocab.clone(),
        params: outcome.params,
        meta: json!({"command": "pretrain", "stage": "pretrain", "epoch": train.epochs}),
    }
    .save(&out.file("checkpoint.json"))?;
    vocab.write(&out.file("vocab.txt"))?;
    let (epochs, table) = epoch_table(&outcome.logs, |_| String::new(), "");
    let report = json!({"sessions_used": outcome.sessions_used, "epochs": epochs});
    out.write_report("pretrain_report", &report, &table)?;
    let mut recorded: Vec<(String, String)> = cfg.encoder.entries();
    recorded.extend(cfg.augmentation.entries());
    recorded.extend(cfg.loss.entries());
    recorded.extend(train.entries().into_iter().map(|(k, v)| (format!("pretrain.{k}"), v)));
    recorded.push(("min_freq".into(), cfg.min_freq.to_string()));
    Ok((train.seed, recorded))
}

fn run_finetune(
    settings: &mut Settings,
    out: &mut OutputDir,
    sessions: &Option<PathBuf>,
    validation: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
    init: &Option<PathBuf>,
) -> Result<Recorded> {
    let path = settings.required("sessions", sessions)?;
    let val_path = settings.input("validation", validation)?;
    let cfg = settings.experiment(ExperimentConfig::default(), Some(Stage::Finetune))?;
    let train = TrainConfig {
        stage: Stage::Finetune,
        ..cfg.finetune.clone()
    };
    let sessions = read_sessions(&path)?;
    let val = val_path.map(|p| read_sessions(&p)).transpose()?;
    let init = load_init(settings, init)?;
    let vocab = training_vocab(settings, vocab, init.as_ref(), &sessions, cfg.min_freq)?;
    let params = initial_params(&cfg, &vocab, init, train.seed)?;
    let mut observer = CheckpointDir::create(out.stage_path(), vocab.clone(), json!({"command": "finetune"}))?;
    let outcome = finetune(&sessions, val.as_deref(), &vocab, params, &train, &mut observer)?;
    drop(observer);
    Checkpoint {
        vocab: vocab.clone(),
        params: outcome.params,
        meta: json!({"command": "finetune", "stage": "finetune", "epoch": outcome.best_epoch}),
    }
    .save(&out.file("checkpoint.json"))?;
    let val_map = |e: usize| {
        outcome
            .validation
            .get(e - 1)
            .map_or_else(String::new, |r| format!(" {:>8.4} {:>8.4}", r.map, r.mrr))
    };
    let head = if outcome.validation.is_empty() { "" } else { "  val_MAP  val_MRR" };
    let (epochs, mut table) = epoch_table(&outcome.logs, val_map, head);
    writeln!(table, "best epoch {}", outcome.best_epoch).expect("String write");
    let validation: Vec<Value> = outcome.validation.iter().map(|r| r.summary_json()).collect();
    let report = json!({
        "instances": outcome.instances,
        "best_epoch": outcome.best_epoch,
        "epochs": epochs,
        "validation": validation,
    });
    out.write_report("finetune_report", &report, &table)?;
    let mut recorded: Vec<(String, String)> = vec![("dropout_rate".into(), cfg.encoder.dropout_rate.to_string())];
    if !settings.inputs.contains_key("init") {
        recorded = cfg.encoder.entries();
    }
    recorded.extend(train.entries().into_iter().map(|(k, v)| (format!("finetune.{k}"), v)));
    recorded.push(("min_freq".into(), cfg.min_freq.to_string()));
    Ok((train.seed, recorded))
}

fn run_predict(
    settings: &mut Settings,
    out: &mut OutputDir,
    checkpoint: &Option<PathBuf>,
    sessions: &Option<PathBuf>,
    tag: &Option<String>,
) -> Result<Recorded> {
    let ck_path = settings.required("checkpoint", checkpoint)?;
    let path = settings.required("sessions", sessions)?;
    let tag = tag.clone().or_else(|| settings.take("tag")).unwrap_or_else(|| DEFAULT_TAG.to_string());
    settings.reject_leftovers()?;
    let ck = Checkpoint::load(&ck_path)?;
    let sessions = read_sessions(&path)?;
    let run = predict(&ck, &sessions, &tag)?;
    run.write(&out.file("run.trec"))?;
    Ok((0, vec![("tag".into(), tag)]))
}

fn run_evaluate(
    settings: &mut Settings,
    out: &mut OutputDir,
    run: &Option<PathBuf>,
    qrels: &Option<PathBuf>,
    sessions: &Option<PathBuf>,
) -> Result<Recorded> {
    let run_path = settings.required("run", run)?;
    let qrels_path = settings.required("qrels", qrels)?;
    let session_path = settings.input("sessions", sessions)?;
    let ks: Vec<usize> = match settings.take("ks") {
        Some(v) => config::parse_list("ks", &v)?,
        None => DEFAULT_KS.to_vec(),
    };
    settings.reject_leftovers()?;
    let run = RunFile::read(&run_path)?;
    let qrels = Qrels::read(&qrels_path)?;
    let report = evaluate(&run, &qrels, &ks)?;
    out.write_report("metrics", &to_value(&report)?, &report.to_table())?;
    if let Some(p) = session_path {
        let b = breakdown(&report, &query_meta(&read_sessions(&p)?));
        out.write_report("breakdown", &to_value(&b)?, &b.to_table())?;
    }
    Ok((0, vec![("ks".into(), config::show_list(&ks))]))
}

struct Grids {
    taus: Vec<f64>,
    batches: Vec<usize>,
    fractions: Vec<f64>,
    epochs: Vec<usize>,
    seeds: Vec<u64>,
}

fn run_sweep(settings: &mut Settings, out: &mut OutputDir, kind: SweepKind, grids: &Grids, tiny: bool) -> Result<Recorded> {
    let base = if tiny { ExperimentConfig::tiny() } else { ExperimentConfig::default() };
    let cfg = settings.experiment(base, None)?;
    // Fail on bad data settings before the first training run.
    prepare_data(&cfg)?;
    let mut recorded = cfg.entries();
    match kind {
        SweepKind::Compare => {
            let c = compare(&cfg, &grids.seeds)?;
            let mut table = format!("{:>6} {:>10} {:>14} {:>8}\n", "seed", "coca_MAP", "finetune_MAP", "gain");
            for s in &c.seeds {
                writeln!(
                    table,
                    "{:>6} {:>10.4} {:>14.4} {:>8.4}",
                    s.seed,
                    s.coca_map,
                    s.finetune_only_map,
                    s.coca_map - s.finetune_only_map
                )
                .expect("String write");
            }
            writeln!(
                table,
                "{:>6} {:>10.4} {:>14.4} {:>8.4}",
                "mean", c.mean_coca_map, c.mean_finetune_only_map, c.mean_gain
            )
            .expect("String write");
            out.write_report("comparison", &to_value(&c)?, &table)?;
            recorded.push(("sweep.seeds".into(), config::show_list(&grids.seeds)));
        }
        _ => {
            let report = match kind {
                SweepKind::Hyperparameters => {
                    recorded.push(("sweep.taus".into(), config::show_list(&grids.taus)));
                    recorded.push(("sweep.batches".into(), config::show_list(&grids.batches)));
                    hyperparameter_sweep(&cfg, &grids.taus, &grids.batches)?
                }
                SweepKind::DataFraction => {
                    recorded.push(("sweep.fractions".into(), config::show_list(&grids.fractions)));
                    data_fraction_sweep(&cfg, &grids.fractions)?
                }
                _ => {
                    recorded.push(("sweep.epochs".into(), config::show_list(&grids.epochs)));
                    epoch_sweep(&cfg, &grids.epochs)?
                }
            };
            out.write_report("sweep", &to_value(&report)?, &report.to_table())?;
        }
    }
    recorded.push(("sweep.kind".into(), kind.name().into()));
    Ok((cfg.synth.seed, recorded))
}

fn run_grad_check(
    settings: &mut Settings,
    out: &mut OutputDir,
    seeds: &[u64],
    vocab_size: usize,
) -> Result<(Vec<(String, String)>, Option<String>)> {
    if seeds.is_empty() {
        return Err(Error::Config("grad-check needs at least one seed".into()));
    }
    let mut enc = EncoderConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 16,
        vocab_size,
        dropout_rate: 0.0,
    };
    config::apply_all(&mut [&mut enc], &settings.pairs)?;
    enc.validate()?;
    let mut rows = Vec::new();
    let mut table = format!("{:>6} {:>8} {:>12} {:<24}\n", "seed", "passed", "worst_err", "worst_tensor");
    let mut failures = Vec::new();
    for &seed in seeds {
        let params = EncoderParams::init_with_std(&enc, GRAD_CHECK_INIT_STD, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let report = grad_check(&params, seed)?;
        let worst = report.worst().cloned();
        let (err, name) = worst
            .as_ref()
            .map_or((0.0, String::new()), |w| (w.max_rel_error, format!("{}:{}", w.loss, w.name)));
        writeln!(table, "{seed:>6} {:>8} {err:>12.3e} {name:<24}", report.passed()).expect("String write");
        if !report.passed() {
            failures.push(format!("seed {seed}: {name} relative error {err:.3e}"));
        }
        rows.push(json!({"seed": seed, "passed": report.passed(), "report": to_value(&report)?}));
    }
    out.write_report("gradcheck", &Value::Array(rows), &table)?;
    let mut recorded = enc.entries();
    recorded.push(("vocab_size".into(), vocab_size.to_string()));
    recorded.push(("seeds".into(), config::show_list(seeds)));
    let failed = (!failures.is_empty()).then(|| format!("gradient check failed: {}", failures.join("; ")));
    Ok((recorded, failed))
}
