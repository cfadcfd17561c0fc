use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use coca_core::{Error, Result};

/// Contrastive session-encoder pretraining and context-aware ranking.
///
/// Any config key can be given as `--key value` after the command, for
/// example `coca pretrain --sessions train.jsonl --tau 0.3 --epochs 2`.
/// Stage keys take a `pretrain.` or `finetune.` prefix where ambiguous.
#[derive(Debug, Parser)]
#[command(name = "coca", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic session corpus with train/validation/test splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Convert a tab-separated click log into canonical session JSONL.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Column descriptor, e.g. `header:session_id,query_text,timestamp,doc_title,click,_`.
        #[arg(long)]
        format: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Build a vocabulary over query and candidate terms.
    BuildVocab {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive pretraining of the sequence encoder.
    Pretrain {
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Vocabulary file; built from the sessions when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the encoder for document ranking.
    Finetune {
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Sessions used to pick the best epoch by MAP.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Vocabulary file, for runs without `--init`.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Pretrained checkpoint; its vocabulary and architecture are kept.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score every candidate of every query and write a TREC run file.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        tag: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// MAP, MRR and NDCG@k of a run against qrels.
    Evaluate {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// Sessions of the run, for the session-length and position breakdown.
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Hyperparameter, data-amount and epoch sweeps on synthetic data.
    Sweep {
        /// Which sweep to run [default: hyperparameters].
        #[arg(long, value_enum)]
        kind: Option<SweepKind>,
        /// Temperatures for the hyperparameter grid.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// Pretraining batch sizes for the hyperparameter grid.
        #[arg(long, value_delimiter = ',')]
        batches: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long = "epoch-grid", value_delimiter = ',')]
        epoch_grid: Option<Vec<usize>>,
        /// Seeds for `--kind compare`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Start from the seconds-scale preset instead of the desk-scale defaults.
        #[arg(long)]
        tiny: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic encoder gradients against finite differences.
    GradCheck {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long = "vocab-size")]
        vocab_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Hyperparameters,
    DataFraction,
    Epochs,
    Compare,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Hyperparameters => "hyperparameters",
            SweepKind::DataFraction => "data-fraction",
            SweepKind::Epochs => "epochs",
            SweepKind::Compare => "compare",
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value config file, or the manifest.json of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to `$COCA_OUTPUT_ROOT/<command>`, or `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Config overrides collected from `--key value` flags.
    #[arg(last = true, hide = true)]
    pub overrides: Vec<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Ingest { .. } => "ingest",
            Command::BuildVocab { .. } => "build-vocab",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::GradCheck { .. } => "grad-check",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Ingest { common, .. }
            | Command::BuildVocab { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Predict { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Sweep { common, .. }
            | Command::GradCheck { common, .. } => common,
        }
    }
}

/// Moves every `--key value` flag that the chosen subcommand does not define
/// behind a `--` separator as `key=value`, where clap collects it into
/// [`Common::overrides`].
pub fn split_overrides(argv: Vec<String>) -> Result<Vec<String>> {
    let cli = Cli::command();
    let mut it = argv.into_iter();
    let mut out: Vec<String> = it.next().into_iter().collect();
    let mut sub = None;
    for tok in it.by_ref() {
        let is_flag = tok.starts_with('-');
        out.push(tok.clone());
        if !is_flag {
            sub = cli.find_subcommand(&tok).cloned();
            break;
        }
    }
    let Some(sub) = sub else {
        out.extend(it);
        return Ok(out);
    };
    let known: Vec<(String, bool)> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .collect();
    let mut overrides = Vec::new();
    let mut rest = it.peekable();
    while let Some(tok) = rest.next() {
        if tok == "--" {
            for t in rest.by_ref() {
                overrides.push(t);
            }
            break;
        }
        let Some(flag) = tok.strip_prefix("--") else {
            out.push(tok);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if name == "help" {
            out.push(tok.clone());
            continue;
        }
        if let Some((_, takes_value)) = known.iter().find(|(k, _)| k == name) {
            out.push(tok.clone());
            if *takes_value && inline.is_none() {
                if let Some(v) = rest.next() {
                    out.push(v);
                }
            }
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => rest
                .next()
                .ok_or_else(|| Error::Config(format!("flag --{name} needs a value")))?,
        };
        overrides.push(format!("{}={value}", name.replace('-', "_")));
    }
    if !overrides.is_empty() {
        out.push("--".into());
        out.extend(overrides);
    }
    Ok(out)
}

/// Parses the collected `key=value` overrides.
pub fn override_pairs(overrides: &[String]) -> Result<Vec<(String, String)>> {
    overrides
        .iter()
        .map(|o| {
            o.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn unknown_flags_become_overrides() {
        let out = split_overrides(argv("coca pretrain --tau 0.3 --sessions a.jsonl --batch-size=8 --force")).unwrap();
        assert_eq!(out, argv("coca pretrain --sessions a.jsonl --force -- tau=0.3 batch_size=8"));
        let cli = Cli::try_parse_from(out).unwrap();
        assert_eq!(cli.command.common().overrides, ["tau=0.3", "batch_size=8"]);
        assert!(cli.command.common().force);
    }

    #[test]
    fn dangling_override_is_a_config_error() {
        assert!(matches!(split_overrides(argv("coca pretrain --tau")), Err(Error::Config(_))));
    }

    #[test]
    fn subcommand_help_is_not_an_override() {
        assert_eq!(split_overrides(argv("coca sweep --help")).unwrap(), argv("coca sweep --help"));
    }

    #[test]
    fn top_level_flags_pass_through() {
        assert_eq!(split_overrides(argv("coca --version")).unwrap(), argv("coca --version"));
    }

    #[test]
    fn override_pairs_need_an_equals_sign() {
        assert!(override_pairs(&["a".into()]).is_err());
        assert_eq!(override_pairs(&["a = 1".into()]).unwrap(), [("a".to_string(), "1".to_string())]);
    }
}
