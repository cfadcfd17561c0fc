use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::EncoderParams;
use crate::augment::positive_mask;
use crate::error::{Error, Result};
use crate::objectives::{batch_loss, batch_loss_grad, rank_loss, rank_loss_grad_logits, ContrastiveLossConfig};
use crate::session::{TokenSequence, CLS, EOS, PAD, RESERVED, SEP};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;
/// Init std for grad checks; at the training init most gradients sit near
/// the finite-difference noise floor.
pub const GRAD_CHECK_INIT_STD: f64 = 0.3;
const FD_STEP: f64 = 1e-5;
const SEQ_LEN: usize = 12;
const BATCH: usize = 4;
/// Gradient magnitude below which a tensor's error is measured in absolute
/// terms. Finite-difference noise at `FD_STEP` is around 1e-11, which would
/// otherwise dominate the ratio for tensors whose true gradient is zero
/// (the key bias, for one).
const SCALE_FLOOR: f64 = 1e-4;

/// Worst disagreement between analytic and finite-difference gradients for
/// one parameter tensor under one loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub loss: &'static str,
    pub name: String,
    /// `max |analytic - numeric|` divided by the largest magnitude of either
    /// gradient over the tensor, floored at `1e-4`.
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn failures(&self) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_error < self.tolerance))
            .collect()
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn random_sequence<R: Rng>(rng: &mut R, vocab: usize, two_segments: bool) -> TokenSequence {
    let real = rng.random_range(6..=SEQ_LEN);
    let mut ids = vec![PAD; SEQ_LEN];
    let mut segments = vec![0u8; SEQ_LEN];
    ids[0] = CLS;
    for id in ids.iter_mut().take(real - 1).skip(1) {
        *id = if vocab > RESERVED.len() {
            rng.random_range(RESERVED.len() as u32..vocab as u32)
        } else {
            EOS
        };
    }
    ids[real - 1] = SEP;
    if two_segments {
        let split = real / 2;
        ids[split - 1] = SEP;
        for s in segments.iter_mut().take(real).skip(split) {
            *s = 1;
        }
    }
    TokenSequence {
        ids,
        segments,
        positions: (0..SEQ_LEN as u32).collect(),
        attn_mask: (0..SEQ_LEN).map(|i| u8::from(i < real)).collect(),
    }
}

struct Problem {
    contrastive: Vec<TokenSequence>,
    ranking: Vec<TokenSequence>,
    labels: Vec<u8>,
    loss: ContrastiveLossConfig,
}

impl Problem {
    fn contrastive_loss(&self, p: &EncoderParams) -> Result<f64> {
        let (rep, _) = p.forward(&self.contrastive, None)?;
        batch_loss(&p.project_g1(&rep), &positive_mask(BATCH / 2), &self.loss)
    }

    fn ranking_loss(&self, p: &EncoderParams) -> Result<f64> {
        let (rep, _) = p.forward(&self.ranking, None)?;
        rank_loss(&p.project_g2(&rep), &self.labels)
    }

    fn contrastive_grads(&self, p: &EncoderParams) -> Result<EncoderParams> {
        let mut grads = p.zeros_like();
        let (rep, trace) = p.forward(&self.contrastive, None)?;
        let (_, d_z) = batch_loss_grad(&p.project_g1(&rep), &positive_mask(BATCH / 2), &self.loss)?;
        let d_rep = p.project_g1_backward(&rep, &d_z, &mut grads);
        p.backward(&trace, &d_rep, &mut grads)?;
        Ok(grads)
    }

    fn ranking_grads(&self, p: &EncoderParams) -> Result<EncoderParams> {
        let mut grads = p.zeros_like();
        let (rep, trace) = p.forward(&self.ranking, None)?;
        let scores = p.project_g2(&rep);
        let d_logits = rank_loss_grad_logits(&scores, &self.labels)?;
        let d_rep = p.project_g2_backward(&rep, &d_logits, &mut grads);
        p.backward(&trace, &d_rep, &mut grads)?;
        Ok(grads)
    }
}

/// Compares analytic gradients against central finite differences for a
/// random contrastive loss and a random ranking loss on sequences of 12
/// tokens. Requires a tiny model (`d_model <= 16`) with dropout disabled.
pub fn grad_check(params: &EncoderParams, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(params, seed, |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradients before
/// comparison; used to confirm the check detects faults.
pub fn grad_check_with(
    params: &EncoderParams,
    seed: u64,
    tamper: impl Fn(&mut EncoderParams),
) -> Result<GradCheckReport> {
    let cfg = &params.config;
    if cfg.dropout_rate != 0.0 {
        return Err(Error::Config("gradient check requires dropout_rate = 0".into()));
    }
    if cfg.d_model > 16 {
        return Err(Error::Config(format!("gradient check needs d_model <= 16, got {}", cfg.d_model)));
    }
    if cfg.max_len < SEQ_LEN {
        return Err(Error::Config(format!("gradient check needs max_len >= {SEQ_LEN}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = Problem {
        contrastive: (0..BATCH).map(|_| random_sequence(&mut rng, cfg.vocab_size, false)).collect(),
        ranking: (0..BATCH).map(|_| random_sequence(&mut rng, cfg.vocab_size, true)).collect(),
        labels: (0..BATCH).map(|i| (i % 2) as u8).collect(),
        loss: ContrastiveLossConfig::default(),
    };

    let mut groups = Vec::new();
    let mut analytic = problem.contrastive_grads(params)?;
    tamper(&mut analytic);
    compare(params, &analytic, "contrastive", |p| problem.contrastive_loss(p), &mut groups)?;
    let mut analytic = problem.ranking_grads(params)?;
    tamper(&mut analytic);
    compare(params, &analytic, "ranking", |p| problem.ranking_loss(p), &mut groups)?;
    Ok(GradCheckReport {
        groups,
        tolerance: GRAD_CHECK_TOLERANCE,
    })
}

fn compare(
    params: &EncoderParams,
    analytic: &EncoderParams,
    loss_name: &'static str,
    loss: impl Fn(&EncoderParams) -> Result<f64>,
    out: &mut Vec<GroupError>,
) -> Result<()> {
    let mut work = params.clone();
    let names = params.tensor_names();
    let analytic_tensors = analytic.named_tensors();
    for (t, name) in names.into_iter().enumerate() {
        let a: &Array2<f64> = analytic_tensors[t].1;
        let mut numeric = Array2::zeros(a.raw_dim());
        for e in 0..a.len() {
            let original = nth(&mut work, t, e, None);
            nth(&mut work, t, e, Some(original + FD_STEP));
            let plus = loss(&work)?;
            nth(&mut work, t, e, Some(original - FD_STEP));
            let minus = loss(&work)?;
            nth(&mut work, t, e, Some(original));
            numeric.as_slice_mut().expect("standard layout")[e] = (plus - minus) / (2.0 * FD_STEP);
        }
        let diff = a
            .iter()
            .zip(numeric.iter())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let scale = a.iter().chain(numeric.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        out.push(GroupError {
            loss: loss_name,
            name,
            max_rel_error: diff / scale.max(SCALE_FLOOR),
            max_abs_grad: scale,
        });
    }
    Ok(())
}

/// Reads element `e` of tensor `t`, optionally overwriting it first.
fn nth(params: &mut EncoderParams, t: usize, e: usize, set: Option<f64>) -> f64 {
    let mut tensors = params.tensors_mut();
    let slot = &mut tensors[t].as_slice_mut().expect("standard layout")[e];
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}
