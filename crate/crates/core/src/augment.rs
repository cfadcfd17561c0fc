//! Behavior-sequence augmentations and contrastive minibatch construction.
//!
//! Three operators produce a perturbed view of a session:
//!
//! * term mask: `⌊N_T·γ⌋` of the `N_T` query/document terms become `[T_MASK]`;
//! * query/document deletion: of the `2n` sub-sequences `q1, d1, ..., qn, dn`,
//!   `⌊2n·μ⌋` collapse to a single `[DEL]`;
//! * behavior reordering: `⌊n·η⌋` swaps of whole `(q, d)` pairs.
//!
//! A batch of `N` sessions yields `2N` views where views `2k` and `2k+1` come
//! from session `k` and form the only positive pair for each other.

use std::fmt;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValueConfig};
use crate::error::{Error, Result};
use crate::session::{assemble_x_encoded, is_special, truncate_head_encoded, EncodedBehavior, Vocab, DEL, T_MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "TM")]
    TermMask,
    #[serde(rename = "QDD")]
    QdDeletion,
    #[serde(rename = "BR")]
    BehaviorReorder,
    /// Identity view, used when no configured strategy applies.
    #[serde(rename = "NONE")]
    Identity,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TM" => Ok(Strategy::TermMask),
            "QDD" => Ok(Strategy::QdDeletion),
            "BR" => Ok(Strategy::BehaviorReorder),
            other => Err(Error::Config(format!("unknown augmentation strategy {other:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::TermMask => "TM",
            Strategy::QdDeletion => "QDD",
            Strategy::BehaviorReorder => "BR",
            Strategy::Identity => "NONE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Term mask ratio.
    pub gamma: f64,
    /// Query/document deletion ratio.
    pub mu: f64,
    /// Behavior reorder ratio.
    pub eta: f64,
    /// Upper bound on reorder swaps per view; `None` leaves `⌊n·η⌋` uncapped.
    pub max_swaps: Option<usize>,
    pub strategies: Vec<Strategy>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            mu: 0.6,
            eta: 0.5,
            max_swaps: Some(1),
            strategies: vec![Strategy::TermMask, Strategy::QdDeletion, Strategy::BehaviorReorder],
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("augmentation strategy set is empty".into()));
        }
        if self.strategies.contains(&Strategy::Identity) {
            return Err(Error::Config("NONE is not a configurable strategy".into()));
        }
        for (name, v) in [("gamma", self.gamma), ("mu", self.mu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta = {} must be >= 0", self.eta)));
        }
        Ok(())
    }

    fn swap_count(&self, n: usize) -> usize {
        let l = (n as f64 * self.eta).floor() as usize;
        self.max_swaps.map_or(l, |cap| l.min(cap))
    }
}

/// Replaces `⌊N_T·γ⌋` distinct term positions with `[T_MASK]`. Special tokens
/// are never selected.
pub fn term_mask<R: Rng + ?Sized>(h: &[EncodedBehavior], gamma: f64, rng: &mut R) -> Vec<EncodedBehavior> {
    let mut out = h.to_vec();
    let slots: Vec<(usize, bool, usize)> = out
        .iter()
        .enumerate()
        .flat_map(|(b, beh)| {
            let q = beh
                .query
                .iter()
                .enumerate()
                .filter(|(_, &id)| !is_special(id))
                .map(move |(i, _)| (b, false, i));
            let d = beh
                .doc
                .iter()
                .enumerate()
                .filter(|(_, &id)| !is_special(id))
                .map(move |(i, _)| (b, true, i));
            q.chain(d)
        })
        .collect();
    let count = (slots.len() as f64 * gamma).floor() as usize;
    for pick in index::sample(rng, slots.len(), count) {
        let (b, is_doc, i) = slots[pick];
        let beh = &mut out[b];
        if is_doc {
            beh.doc[i] = T_MASK;
        } else {
            beh.query[i] = T_MASK;
        }
    }
    out
}

/// Replaces `⌊2n·μ⌋` distinct sub-sequences (queries or documents) with a
/// single `[DEL]` token each.
pub fn qd_deletion<R: Rng + ?Sized>(h: &[EncodedBehavior], mu: f64, rng: &mut R) -> Vec<EncodedBehavior> {
    let mut out = h.to_vec();
    let subseqs = 2 * out.len();
    let count = (subseqs as f64 * mu).floor() as usize;
    for s in index::sample(rng, subseqs, count) {
        let beh = &mut out[s / 2];
        let part = if s % 2 == 0 { &mut beh.query } else { &mut beh.doc };
        *part = vec![DEL];
    }
    out
}

/// Performs `swaps` independent transpositions of whole behaviors. Sequences
/// with fewer than two behaviors are returned unchanged.
pub fn behavior_reorder<R: Rng + ?Sized>(
    h: &[EncodedBehavior],
    swaps: usize,
    rng: &mut R,
) -> Vec<EncodedBehavior> {
    let mut out = h.to_vec();
    let n = out.len();
    if n < 2 {
        return out;
    }
    for _ in 0..swaps {
        let u = rng.random_range(0..n);
        let mut v = rng.random_range(0..n - 1);
        if v >= u {
            v += 1;
        }
        out.swap(u, v);
    }
    out
}

/// Reorder with the swap count derived from `η` as `⌊n·η⌋`.
pub fn behavior_reorder_ratio<R: Rng + ?Sized>(
    h: &[EncodedBehavior],
    eta: f64,
    rng: &mut R,
) -> Vec<EncodedBehavior> {
    let swaps = (h.len() as f64 * eta).floor() as usize;
    behavior_reorder(h, swaps, rng)
}

/// Uniform draw from the configured strategies. Reordering is excluded for
/// single-behavior sequences; if nothing is left the view is the identity.
pub fn sample_strategy<R: Rng + ?Sized>(
    h: &[EncodedBehavior],
    config: &AugmentationConfig,
    rng: &mut R,
) -> Strategy {
    let applicable: Vec<Strategy> = config
        .strategies
        .iter()
        .copied()
        .filter(|&s| !(s == Strategy::BehaviorReorder && h.len() < 2))
        .collect();
    applicable.choose(rng).copied().unwrap_or(Strategy::Identity)
}

pub fn apply_strategy<R: Rng + ?Sized>(
    h: &[EncodedBehavior],
    strategy: Strategy,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Vec<EncodedBehavior> {
    match strategy {
        Strategy::TermMask => term_mask(h, config.gamma, rng),
        Strategy::QdDeletion => qd_deletion(h, config.mu, rng),
        Strategy::BehaviorReorder => behavior_reorder(h, config.swap_count(h.len()), rng),
        Strategy::Identity => h.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedView {
    pub source_index: usize,
    pub strategy: Strategy,
    pub behaviors: Vec<EncodedBehavior>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub views: Vec<AugmentedView>,
    /// `positive_mask[i][j]` is set iff views `i` and `j` come from the same session.
    pub positive_mask: Vec<Vec<bool>>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Index of the positive partner of view `i`.
    pub fn partner(&self, i: usize) -> usize {
        i ^ 1
    }

    /// One JSON object per view with its rendered token strings.
    pub fn dump_jsonl(&self, vocab: &Vocab, max_len: usize) -> String {
        let mut out = String::new();
        for v in &self.views {
            let x = assemble_x_encoded(&v.behaviors, max_len);
            let real = x.real_len();
            let line = serde_json::json!({
                "source_index": v.source_index,
                "strategy": v.strategy,
                "tokens": vocab.render(&x.ids[..real]),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Positive-pair mask for `2n` views laid out as consecutive pairs.
pub fn positive_mask(n: usize) -> Vec<Vec<bool>> {
    (0..2 * n)
        .map(|i| (0..2 * n).map(|j| i != j && i / 2 == j / 2).collect())
        .collect()
}

/// Builds the `2N` augmented views of `sessions`. Each source is first
/// truncated to `max_len` tokens, then augmented twice with independently
/// drawn strategies.
pub fn make_contrastive_batch<R: Rng + ?Sized>(
    sessions: &[&[EncodedBehavior]],
    config: &AugmentationConfig,
    max_len: usize,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    if sessions.len() < 2 {
        return Err(Error::Config("batch too small for contrastive objective".into()));
    }
    let mut views = Vec::with_capacity(2 * sessions.len());
    for (k, h) in sessions.iter().enumerate() {
        if h.is_empty() {
            return Err(Error::Data(format!("session {k} in batch has no behaviors")));
        }
        let source = truncate_head_encoded(h, max_len);
        for _ in 0..2 {
            let strategy = sample_strategy(source, config, rng);
            views.push(AugmentedView {
                source_index: k,
                strategy,
                behaviors: apply_strategy(source, strategy, config, rng),
            });
        }
    }
    Ok(ContrastiveBatch {
        positive_mask: positive_mask(sessions.len()),
        views,
    })
}

impl KeyValueConfig for AugmentationConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "gamma" => self.gamma = config::parse(key, value)?,
            "mu" => self.mu = config::parse(key, value)?,
            "eta" => self.eta = config::parse(key, value)?,
            "max_swaps" => self.max_swaps = config::parse_optional(key, value)?,
            "strategies" => {
                self.strategies = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(Strategy::parse)
                    .collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("gamma".into(), self.gamma.to_string()),
            ("mu".into(), self.mu.to_string()),
            ("eta".into(), self.eta.to_string()),
            ("max_swaps".into(), config::show_optional(&self.max_swaps)),
            ("strategies".into(), config::show_list(&self.strategies)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{EMPTY, EOS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn beh(q: &[u32], d: &[u32]) -> EncodedBehavior {
        EncodedBehavior {
            query: q.to_vec(),
            doc: d.to_vec(),
        }
    }

    fn count(h: &[EncodedBehavior], id: u32) -> usize {
        h.iter()
            .map(|b| b.query.iter().chain(&b.doc).filter(|&&t| t == id).count())
            .sum()
    }

    #[test]
    fn term_mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = vec![beh(&[10, 11], &[12, 13, 14])];
        let m = term_mask(&h, 0.4, &mut rng);
        assert_eq!(count(&m, T_MASK), 2);
        assert_eq!(m[0].query.len(), 2);
        assert_eq!(m[0].doc.len(), 3);
        assert_eq!(term_mask(&h, 0.0, &mut rng), h);
        let full = term_mask(&h, 1.0, &mut rng);
        assert_eq!(count(&full, T_MASK), 5);
    }

    #[test]
    fn term_mask_skips_specials() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = vec![beh(&[10], &[EMPTY]), beh(&[11, 12], &[13])];
        let m = term_mask(&h, 1.0, &mut rng);
        assert_eq!(m[0].doc, vec![EMPTY]);
        assert_eq!(count(&m, T_MASK), 4);
    }

    #[test]
    fn deletion_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h2 = vec![beh(&[10, 11], &[12]), beh(&[13], &[14, 15])];
        let d = qd_deletion(&h2, 0.6, &mut rng);
        let dels = d.iter().flat_map(|b| [&b.query, &b.doc]).filter(|p| **p == vec![DEL]).count();
        assert_eq!(dels, 2);
        assert_eq!(qd_deletion(&h2, 0.0, &mut rng), h2);

        let h1 = vec![beh(&[10], &[11])];
        let d = qd_deletion(&h1, 0.6, &mut rng);
        assert!((d[0].query == vec![DEL]) ^ (d[0].doc == vec![DEL]));
    }

    #[test]
    fn reorder_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let one = vec![beh(&[10], &[11])];
        assert_eq!(behavior_reorder_ratio(&one, 5.0, &mut rng), one);

        let three = vec![beh(&[1 + 10], &[11]), beh(&[12], &[13]), beh(&[14], &[15])];
        // find a seed whose single swap is (0, 2)
        let mut seen_outer_swap = false;
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = behavior_reorder(&three, 1, &mut rng);
            assert_ne!(r, three);
            if r[1] == three[1] {
                assert_eq!(r, vec![three[2].clone(), three[1].clone(), three[0].clone()]);
                seen_outer_swap = true;
            }
        }
        assert!(seen_outer_swap);
    }

    #[test]
    fn strategy_sampling_respects_length() {
        let config = AugmentationConfig::default();
        let one = vec![beh(&[10], &[11])];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = sample_strategy(&one, &config, &mut rng);
            assert!(matches!(s, Strategy::TermMask | Strategy::QdDeletion));
        }
        let three = vec![one[0].clone(); 3];
        let tm_only = AugmentationConfig {
            strategies: vec![Strategy::TermMask],
            ..config.clone()
        };
        assert_eq!(sample_strategy(&three, &tm_only, &mut rng), Strategy::TermMask);
        let br_only = AugmentationConfig {
            strategies: vec![Strategy::BehaviorReorder],
            ..config
        };
        assert_eq!(sample_strategy(&one, &br_only, &mut rng), Strategy::Identity);
    }

    #[test]
    fn strategy_frequencies_are_uniform() {
        let config = AugmentationConfig::default();
        let three = vec![beh(&[10], &[11]); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            match sample_strategy(&three, &config, &mut rng) {
                Strategy::TermMask => counts[0] += 1,
                Strategy::QdDeletion => counts[1] += 1,
                Strategy::BehaviorReorder => counts[2] += 1,
                Strategy::Identity => unreachable!(),
            }
        }
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 2 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts = {counts:?}");
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn batch_layout_and_mask() {
        let a = vec![beh(&[10], &[11]), beh(&[12], &[13])];
        let b = vec![beh(&[14], &[15])];
        let config = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = make_contrastive_batch(&[&a, &b], &config, 128, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        let ones: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| batch.positive_mask[i][j])
            .collect();
        assert_eq!(ones, vec![(0, 1), (1, 0), (2, 3), (3, 2)]);
        assert_eq!(batch.views[3].source_index, 1);

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(make_contrastive_batch(&[&a, &b], &config, 128, &mut rng2).unwrap(), batch);

        assert!(make_contrastive_batch(&[&a], &config, 128, &mut rng).is_err());
    }

    #[test]
    fn batch_of_128_has_254_negatives_per_view() {
        let sessions: Vec<Vec<EncodedBehavior>> = (0..128).map(|i| vec![beh(&[10 + i], &[11])]).collect();
        let refs: Vec<&[EncodedBehavior]> = sessions.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = make_contrastive_batch(&refs, &AugmentationConfig::default(), 128, &mut rng).unwrap();
        assert_eq!(batch.len(), 256);
        for (i, row) in batch.positive_mask.iter().enumerate() {
            let negatives = (0..256).filter(|&j| j != i && !row[j]).count();
            assert_eq!(negatives, 254);
        }
    }

    #[test]
    fn batch_dump_renders_tokens() {
        let mut counts = std::collections::HashMap::new();
        counts.insert("hello".to_string(), 1);
        let vocab = Vocab::from_counts(&counts, 1).unwrap();
        let a = vec![beh(&[8], &[EMPTY])];
        let batch = ContrastiveBatch {
            views: vec![
                AugmentedView {
                    source_index: 0,
                    strategy: Strategy::Identity,
                    behaviors: a.clone(),
                },
                AugmentedView {
                    source_index: 0,
                    strategy: Strategy::TermMask,
                    behaviors: vec![beh(&[T_MASK], &[EMPTY])],
                },
            ],
            positive_mask: positive_mask(1),
        };
        let dump = batch.dump_jsonl(&vocab, 16);
        let first: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
        assert_eq!(first["strategy"], "NONE");
        assert_eq!(
            first["tokens"],
            serde_json::json!(["[CLS]", "hello", "[EOS]", "[EMPTY]", "[EOS]", "[SEP]"])
        );
        assert!(dump.lines().nth(1).unwrap().contains("[T_MASK]"));
        assert_eq!(count(&a, EOS), 0);
    }
}
