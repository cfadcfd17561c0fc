use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clip_global_norm, optimizer_step, subsample, OptimizerState, Stage, StepLog, TrainConfig, TrainObserver};
use crate::encoder::{Checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, quantize_score, MetricsReport, Qrels, RunFile, DEFAULT_KS};
use crate::objectives::{rank_loss, rank_loss_grad_logits};
use crate::session::{assemble_y_encoded, candidate_id, Session, TokenSequence, Vocab, UNK};

const SCORE_BATCH: usize = 64;

/// One pointwise ranking example: a query in context and one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingInstance {
    pub query_id: String,
    pub doc_id: String,
    pub input: TokenSequence,
    pub label: u8,
}

/// One instance per candidate of every query, with the query's history
/// `H_{i-1}` as context. Queries without candidates are skipped.
pub fn ranking_instances(sessions: &[Session], vocab: &Vocab, max_len: usize) -> Vec<RankingInstance> {
    let mut out = Vec::new();
    for s in sessions {
        let behaviors = vocab.encode_sequence(&s.behavior_sequence());
        for (i, q) in s.queries.iter().enumerate() {
            if q.candidates.is_empty() {
                log::warn!("query {} has no candidates, skipped", s.query_id(i));
                continue;
            }
            let query = vocab.encode(&q.query.tokens);
            for (j, d) in q.candidates.iter().enumerate() {
                out.push(RankingInstance {
                    query_id: s.query_id(i),
                    doc_id: candidate_id(j),
                    input: assemble_y_encoded(&behaviors[..i], &query, &vocab.encode(&d.title_tokens), max_len),
                    label: d.click_label,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters from the epoch with the best validation MAP, or the last
    /// epoch without validation data.
    pub params: EncoderParams,
    pub best_epoch: usize,
    pub validation: Vec<MetricsReport>,
    pub logs: Vec<StepLog>,
    pub instances: usize,
}

/// Fine-tunes `params` for ranking. The `g2` head is re-initialized; `g1`
/// is left untouched and unused.
pub fn finetune(
    sessions: &[Session],
    validation: Option<&[Session]>,
    vocab: &Vocab,
    mut params: EncoderParams,
    train: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneOutcome> {
    train.validate()?;
    train.check_frozen(&params)?;
    if params.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "encoder expects {} tokens, vocabulary has {}",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    params.reset_g2(&mut rng);
    let used = subsample(sessions, train.data_fraction, &mut rng);
    let instances = ranking_instances(&used, vocab, params.config.max_len);
    if instances.is_empty() {
        return Err(Error::Data("no ranking instances to train on".into()));
    }
    let val_qrels = validation.map(Qrels::from_sessions);
    let batches_per_epoch = instances.len().div_ceil(train.batch_size);
    let total = batches_per_epoch * train.epochs;
    let mut state = OptimizerState::new(&params, train.weight_decay).with_frozen(&train.frozen);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut logs = Vec::with_capacity(total);
    let mut reports = Vec::new();
    let mut best: Option<(usize, f64, EncoderParams)> = None;
    let mut step = 0;
    let dropout = params.config.dropout_rate > 0.0;
    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            let inputs: Vec<TokenSequence> = chunk.iter().map(|&i| instances[i].input.clone()).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| instances[i].label).collect();
            let (rep, trace) = if dropout {
                params.forward(&inputs, Some(&mut rng))?
            } else {
                params.forward(&inputs, None)?
            };
            let scores = params.project_g2(&rep);
            let value = rank_loss(&scores, &labels)?;
            let d_logits = rank_loss_grad_logits(&scores, &labels)?;
            let mut grads = params.zeros_like();
            let d_rep = params.project_g2_backward(&rep, &d_logits, &mut grads);
            params.backward(&trace, &d_rep, &mut grads)?;
            if let Some(c) = train.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let lr = train.lr_at(step, total);
            optimizer_step(&mut params, &grads, &mut state, lr)?;
            let log = StepLog {
                stage: Stage::Finetune,
                epoch,
                step,
                loss: value,
                lr,
                acc: None,
            };
            observer.on_step(&log)?;
            logs.push(log);
            step += 1;
        }
        if !params.is_finite() {
            return Err(Error::Numerical(format!("parameters diverged in fine-tuning epoch {epoch}")));
        }
        let report = match (validation, &val_qrels) {
            (Some(v), Some(q)) => Some(evaluate(&score_run(&params, vocab, v, "val")?, q, &DEFAULT_KS)?),
            _ => None,
        };
        observer.on_epoch(Stage::Finetune, epoch, &params, report.as_ref())?;
        match report {
            Some(r) => {
                if best.as_ref().is_none_or(|(_, m, _)| r.map > *m) {
                    best = Some((epoch, r.map, params.clone()));
                }
                reports.push(r);
            }
            None => best = Some((epoch, f64::NAN, params.clone())),
        }
    }
    let (best_epoch, _, params) = best.expect("epochs >= 1");
    Ok(FinetuneOutcome {
        params,
        best_epoch,
        validation: reports,
        logs,
        instances: instances.len(),
    })
}

/// Ranking scores for every candidate of every query, without dropout.
pub fn score_sessions(params: &EncoderParams, vocab: &Vocab, sessions: &[Session]) -> Result<Vec<(String, String, f64)>> {
    let instances = ranking_instances(sessions, vocab, params.config.max_len);
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(SCORE_BATCH) {
        let inputs: Vec<TokenSequence> = chunk.iter().map(|i| i.input.clone()).collect();
        let (rep, _) = params.forward(&inputs, None)?;
        for (inst, s) in chunk.iter().zip(params.project_g2(&rep)) {
            if !s.is_finite() {
                return Err(Error::Numerical(format!("non-finite score for {} {}", inst.query_id, inst.doc_id)));
            }
            out.push((inst.query_id.clone(), inst.doc_id.clone(), quantize_score(s)));
        }
    }
    Ok(out)
}

fn score_run(params: &EncoderParams, vocab: &Vocab, sessions: &[Session], tag: &str) -> Result<RunFile> {
    Ok(RunFile::from_scores(tag, score_sessions(params, vocab, sessions)?))
}

/// Largest tolerated share of input terms missing from the checkpoint's
/// vocabulary before the input is treated as belonging to another corpus.
const MAX_OOV_RATE: f64 = 0.5;

/// Scores `sessions` with a fine-tuned checkpoint.
pub fn predict(checkpoint: &Checkpoint, sessions: &[Session], tag: &str) -> Result<RunFile> {
    let vocab = &checkpoint.vocab;
    let (mut total, mut unknown) = (0usize, 0usize);
    for s in sessions {
        for q in &s.queries {
            let terms = q.query.tokens.iter().chain(q.candidates.iter().flat_map(|d| &d.title_tokens));
            for t in terms {
                total += 1;
                unknown += usize::from(vocab.id(t) == UNK);
            }
        }
    }
    if total > 0 && unknown as f64 / total as f64 > MAX_OOV_RATE {
        return Err(Error::Data(format!(
            "vocabulary mismatch: {unknown} of {total} input terms are unknown to the checkpoint"
        )));
    }
    score_run(&checkpoint.params, vocab, sessions, tag)
}
