//! Synthetic session logs with planted latent intents, AOL-style log
//! ingestion, and session-level splits.
//!
//! Intents come in families of two (three when the count is odd). Each
//! intent owns a set of specific terms; each family shares a smaller set of
//! family terms; a generic pool supplies off-intent noise. A session's first
//! query names its intent, while follow-up queries are short and usually
//! built from family terms alone, so only the history separates the clicked
//! document from the hard distractor drawn from a sibling intent.

mod ingest;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use ingest::{ingest_aol, Column, IngestFormat, IngestReport};

use crate::config::{self, KeyValueConfig};
use crate::error::{Error, Result};
use crate::evaluation::RunFile;
use crate::session::{candidate_id, tokenize, Document, LoggedQuery, Query, Session};

/// Share of vocabulary reserved for the generic pool.
const GENERIC_SHARE: f64 = 0.1;
/// Share of a family's block used for the shared family terms.
const FAMILY_SHARE: f64 = 0.2;
/// Probability that a document term comes from the intent's specific terms
/// rather than its family terms.
const DOC_SPECIFIC: f64 = 0.7;
const MIN_SPECIFIC_TERMS: usize = 3;
const MIN_FAMILY_TERMS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_intents: usize,
    pub vocab_terms: usize,
    pub session_count: usize,
    /// Weights over session lengths 1..=len.
    pub session_len_weights: Vec<f64>,
    pub candidates_per_query: usize,
    pub query_len_range: (usize, usize),
    pub doc_len_range: (usize, usize),
    /// Probability that a term is drawn from the intent rather than the generic pool.
    pub intent_term_overlap: f64,
    /// Probability that the click moves to a random distractor.
    pub noise_rate: f64,
    /// Probability that a follow-up query carries no intent-specific term.
    pub ambiguity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_intents: 20,
            vocab_terms: 600,
            session_count: 2500,
            session_len_weights: vec![0.28, 0.25, 0.2, 0.15, 0.12],
            candidates_per_query: 5,
            query_len_range: (1, 4),
            doc_len_range: (3, 6),
            intent_term_overlap: 0.9,
            noise_rate: 0.1,
            ambiguity: 0.8,
            seed: 0,
        }
    }
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    let parts: Vec<usize> = config::parse_list(key, value)?;
    match parts[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key} expects two comma-separated integers"))),
    }
}

impl KeyValueConfig for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_intents" => self.n_intents = config::parse(key, value)?,
            "vocab_terms" => self.vocab_terms = config::parse(key, value)?,
            "session_count" => self.session_count = config::parse(key, value)?,
            "session_len_weights" => self.session_len_weights = config::parse_list(key, value)?,
            "candidates_per_query" => self.candidates_per_query = config::parse(key, value)?,
            "query_len_range" => self.query_len_range = parse_range(key, value)?,
            "doc_len_range" => self.doc_len_range = parse_range(key, value)?,
            "intent_term_overlap" => self.intent_term_overlap = config::parse(key, value)?,
            "noise_rate" => self.noise_rate = config::parse(key, value)?,
            "ambiguity" => self.ambiguity = config::parse(key, value)?,
            "seed" => self.seed = config::parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("n_intents".into(), self.n_intents.to_string()),
            ("vocab_terms".into(), self.vocab_terms.to_string()),
            ("session_count".into(), self.session_count.to_string()),
            ("session_len_weights".into(), config::show_list(&self.session_len_weights)),
            ("candidates_per_query".into(), self.candidates_per_query.to_string()),
            (
                "query_len_range".into(),
                format!("{},{}", self.query_len_range.0, self.query_len_range.1),
            ),
            (
                "doc_len_range".into(),
                format!("{},{}", self.doc_len_range.0, self.doc_len_range.1),
            ),
            ("intent_term_overlap".into(), self.intent_term_overlap.to_string()),
            ("noise_rate".into(), self.noise_rate.to_string()),
            ("ambiguity".into(), self.ambiguity.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_intents < 2 {
            return bad(format!("n_intents {} must be >= 2", self.n_intents));
        }
        if self.candidates_per_query < 2 {
            return bad(format!("candidates_per_query {} must be >= 2", self.candidates_per_query));
        }
        if self.session_count == 0 {
            return bad("session_count must be >= 1".into());
        }
        let w = &self.session_len_weights;
        if w.is_empty() || w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return bad("session_len_weights must be non-negative with a positive sum".into());
        }
        for (name, (lo, hi)) in [("query_len_range", self.query_len_range), ("doc_len_range", self.doc_len_range)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} ({lo}, {hi}) must satisfy 1 <= min <= max"));
            }
        }
        if !(self.intent_term_overlap > 0.0 && self.intent_term_overlap <= 1.0) {
            return bad(format!("intent_term_overlap {} outside (0, 1]", self.intent_term_overlap));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad(format!("ambiguity {} outside [0, 1]", self.ambiguity));
        }
        IntentModel::new(self).map(|_| ())
    }

    pub fn mean_session_len(&self) -> f64 {
        let total: f64 = self.session_len_weights.iter().sum();
        self.session_len_weights
            .iter()
            .enumerate()
            .map(|(i, w)| (i + 1) as f64 * w)
            .sum::<f64>()
            / total
    }
}

/// The planted term structure behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentModel {
    pub terms: Vec<String>,
    pub specific: Vec<Vec<usize>>,
    pub family_of: Vec<usize>,
    pub families: Vec<Vec<usize>>,
    pub family_terms: Vec<Vec<usize>>,
    pub generic: Vec<usize>,
    overlap: f64,
}

impl IntentModel {
    fn new(cfg: &SynthConfig) -> Result<Self> {
        let n = cfg.n_intents;
        let n_families = n / 2;
        let generic_len = if cfg.intent_term_overlap < 1.0 {
            ((cfg.vocab_terms as f64 * GENERIC_SHARE) as usize).max(1)
        } else {
            0
        };
        let per_family = cfg.vocab_terms.saturating_sub(generic_len) / n_families;
        let shared = (per_family as f64 * FAMILY_SHARE) as usize;
        let mut families: Vec<Vec<usize>> = (0..n_families).map(|f| vec![2 * f, 2 * f + 1]).collect();
        if n % 2 == 1 {
            families[n_families - 1].push(n - 1);
        }
        let max_members = families.iter().map(Vec::len).max().unwrap_or(2);
        let specific_len = per_family.saturating_sub(shared) / max_members;
        if shared < MIN_FAMILY_TERMS || specific_len < MIN_SPECIFIC_TERMS {
            return Err(Error::Config(format!(
                "vocab_terms {} too small for {} intents (need at least {} specific and {} shared terms each)",
                cfg.vocab_terms, n, MIN_SPECIFIC_TERMS, MIN_FAMILY_TERMS
            )));
        }
        let mut next = 0;
        let mut take = |k: usize| {
            let ids: Vec<usize> = (next..next + k).collect();
            next += k;
            ids
        };
        let mut family_of = vec![0; n];
        let mut specific = vec![Vec::new(); n];
        let mut family_terms = Vec::with_capacity(n_families);
        for (f, members) in families.iter().enumerate() {
            family_terms.push(take(shared));
            for &m in members {
                family_of[m] = f;
                specific[m] = take(specific_len);
            }
        }
        let generic = take(generic_len);
        let terms = (0..next).map(term_name).collect();
        Ok(Self {
            terms,
            specific,
            family_of,
            families,
            family_terms,
            generic,
            overlap: cfg.intent_term_overlap,
        })
    }

    pub fn siblings(&self, intent: usize) -> Vec<usize> {
        self.families[self.family_of[intent]]
            .iter()
            .copied()
            .filter(|&m| m != intent)
            .collect()
    }

    /// Probability of `term` as a document term under `intent`.
    pub fn term_prob(&self, intent: usize, term: &str) -> f64 {
        let Some(idx) = term_index(term) else { return 0.0 };
        let mut p = 0.0;
        if self.specific[intent].contains(&idx) {
            p += self.overlap * DOC_SPECIFIC / self.specific[intent].len() as f64;
        }
        if self.family_terms[self.family_of[intent]].contains(&idx) {
            p += self.overlap * (1.0 - DOC_SPECIFIC) / self.family_terms[self.family_of[intent]].len() as f64;
        }
        if self.generic.contains(&idx) {
            p += (1.0 - self.overlap) / self.generic.len() as f64;
        }
        p
    }

    fn draw<R: Rng>(&self, pool: &[usize], rng: &mut R) -> String {
        if !self.generic.is_empty() && rng.random::<f64>() >= self.overlap {
            return self.terms[*self.generic.choose(rng).expect("non-empty")].clone();
        }
        self.terms[*pool.choose(rng).expect("pools are non-empty")].clone()
    }

    fn document<R: Rng>(&self, intent: usize, len: usize, rng: &mut R) -> String {
        let fam = &self.family_terms[self.family_of[intent]];
        let mut words = vec![self.terms[*self.specific[intent].choose(rng).expect("non-empty")].clone()];
        for _ in 1..len {
            let pool = if rng.random::<f64>() < DOC_SPECIFIC {
                &self.specific[intent]
            } else {
                fam
            };
            words.push(self.draw(pool, rng));
        }
        words.join(" ")
    }

    fn query<R: Rng>(&self, intent: usize, len: usize, specific: bool, rng: &mut R) -> String {
        let fam = &self.family_terms[self.family_of[intent]];
        let mut words = Vec::with_capacity(len);
        if specific {
            words.push(self.terms[*self.specific[intent].choose(rng).expect("non-empty")].clone());
        }
        while words.len() < len {
            let pool = if specific && rng.random::<bool>() {
                &self.specific[intent]
            } else {
                fam
            };
            words.push(self.draw(pool, rng));
        }
        words.join(" ")
    }
}

fn term_name(i: usize) -> String {
    format!("w{i}")
}

fn term_index(term: &str) -> Option<usize> {
    term.strip_prefix('w')?.parse().ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub sessions: Vec<Session>,
    /// Latent intent of each session.
    pub intents: Vec<usize>,
    pub model: IntentModel,
}

/// Generates `session_count` sessions. Session `k` draws from its own RNG
/// stream, so a corpus is a prefix of any larger corpus with the same seed.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let model = IntentModel::new(cfg)?;
    let lengths = WeightedIndex::new(&cfg.session_len_weights)
        .map_err(|e| Error::Config(format!("session_len_weights: {e}")))?;
    let (qlo, qhi) = cfg.query_len_range;
    let (dlo, dhi) = cfg.doc_len_range;
    let short_hi = qlo + (qhi - qlo) / 2;
    let mut sessions = Vec::with_capacity(cfg.session_count);
    let mut intents = Vec::with_capacity(cfg.session_count);
    for k in 0..cfg.session_count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let intent = rng.random_range(0..cfg.n_intents);
        let siblings = model.siblings(intent);
        let others: Vec<usize> = (0..cfg.n_intents).filter(|&i| i != intent).collect();
        let len = lengths.sample(&mut rng) + 1;
        let mut queries = Vec::with_capacity(len);
        for pos in 0..len {
            let text = if pos == 0 {
                model.query(intent, rng.random_range(qlo..=qhi), true, &mut rng)
            } else {
                let specific = rng.random::<f64>() >= cfg.ambiguity;
                model.query(intent, rng.random_range(qlo..=short_hi), specific, &mut rng)
            };
            let mut docs: Vec<(String, bool)> = Vec::with_capacity(cfg.candidates_per_query);
            docs.push((model.document(intent, rng.random_range(dlo..=dhi), &mut rng), true));
            let sibling = *siblings.choose(&mut rng).expect("families have >= 2 members");
            docs.push((model.document(sibling, rng.random_range(dlo..=dhi), &mut rng), false));
            while docs.len() < cfg.candidates_per_query {
                let other = *others.choose(&mut rng).expect("n_intents >= 2");
                docs.push((model.document(other, rng.random_range(dlo..=dhi), &mut rng), false));
            }
            docs.shuffle(&mut rng);
            if rng.random::<f64>() < cfg.noise_rate {
                let distractors: Vec<usize> = (0..docs.len()).filter(|&j| !docs[j].1).collect();
                let to = *distractors.choose(&mut rng).expect("at least one distractor");
                for (j, d) in docs.iter_mut().enumerate() {
                    d.1 = j == to;
                }
            }
            let candidates = docs
                .into_iter()
                .map(|(title, click)| Document::new(title, u8::from(click), None))
                .collect::<Result<Vec<_>>>()?;
            queries.push(LoggedQuery {
                query: Query::new(text, (pos as i64 + 1) * 60)?,
                candidates,
            });
        }
        sessions.push(Session::new(format!("s{k:05}"), queries)?);
        intents.push(intent);
    }
    Ok(SyntheticCorpus {
        sessions,
        intents,
        model,
    })
}

/// Ranks candidates by the mean probability of their terms under the
/// session's true intent.
pub fn oracle_run(corpus: &SyntheticCorpus) -> RunFile {
    let mut rows = Vec::new();
    for (s, &intent) in corpus.sessions.iter().zip(&corpus.intents) {
        for (i, q) in s.queries.iter().enumerate() {
            for (j, d) in q.candidates.iter().enumerate() {
                let terms = tokenize(&d.title);
                let score = terms.iter().map(|t| corpus.model.term_prob(intent, t)).sum::<f64>()
                    / terms.len().max(1) as f64;
                rows.push((s.query_id(i), candidate_id(j), score));
            }
        }
    }
    RunFile::from_scores("oracle", rows)
}

/// Uniformly random scores from a seeded generator.
pub fn random_run(sessions: &[Session], seed: u64) -> RunFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for s in sessions {
        for (i, q) in s.queries.iter().enumerate() {
            for j in 0..q.candidates.len() {
                rows.push((s.query_id(i), candidate_id(j), rng.random::<f64>()));
            }
        }
    }
    RunFile::from_scores("random", rows)
}

/// Session-level split into `ratios.len()` disjoint parts. Part sizes are
/// `⌊r·n⌋` except the last, which takes the remainder. Sessions keep their
/// original relative order inside each part.
pub fn split(sessions: &[Session], ratios: &[f64], seed: u64) -> Result<Vec<Vec<Session>>> {
    if ratios.is_empty() || ratios.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios sum to {total}, not 1")));
    }
    let n = sessions.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(ratios.len());
    let mut start = 0;
    for (p, &r) in ratios.iter().enumerate() {
        let size = if p + 1 == ratios.len() {
            n - start
        } else {
            ((r * n as f64 + 1e-9).floor() as usize).min(n - start)
        };
        let mut idx = order[start..start + size].to_vec();
        if idx.is_empty() {
            return Err(Error::Data(format!("split part {p} (ratio {r}) received no sessions out of {n}")));
        }
        idx.sort_unstable();
        parts.push(idx.into_iter().map(|i| sessions[i].clone()).collect());
        start += size;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{evaluate, Qrels, DEFAULT_KS};

    fn small(count: usize) -> SynthConfig {
        SynthConfig {
            session_count: count,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn exact_session_count_and_one_click() {
        let c = generate(&small(100)).unwrap();
        assert_eq!(c.sessions.len(), 100);
        for s in &c.sessions {
            for q in &s.queries {
                assert_eq!(q.candidates.len(), 5);
                assert_eq!(q.candidates.iter().filter(|d| d.click_label == 1).count(), 1);
            }
        }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = generate(&small(50)).unwrap();
        let b = generate(&small(50)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(80)).unwrap();
        assert_eq!(a.sessions[..], c.sessions[..50]);
        let d = generate(&SynthConfig { seed: 1, ..small(50) }).unwrap();
        assert_ne!(a.sessions, d.sessions);
    }

    #[test]
    fn noiseless_clicks_follow_session_intent() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            intent_term_overlap: 1.0,
            ..small(200)
        };
        let c = generate(&cfg).unwrap();
        for (s, &intent) in c.sessions.iter().zip(&c.intents) {
            for q in &s.queries {
                let clicked = q.first_click().unwrap();
                // every clicked title starts with one of the intent's own terms
                let first = tokenize(&clicked.title)[0].clone();
                assert!(c.model.specific[intent].contains(&term_index(&first).unwrap()));
            }
        }
    }

    #[test]
    fn intent_oracle_is_near_perfect_without_noise() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            intent_term_overlap: 1.0,
            ..small(500)
        };
        let c = generate(&cfg).unwrap();
        let rep = evaluate(&oracle_run(&c), &Qrels::from_sessions(&c.sessions), &DEFAULT_KS).unwrap();
        assert!(rep.map >= 0.95, "oracle MAP {}", rep.map);
    }

    #[test]
    fn session_length_mean_matches_weights() {
        let cfg = small(2000);
        let c = generate(&cfg).unwrap();
        let mean = c.sessions.iter().map(Session::len).sum::<usize>() as f64 / 2000.0;
        let target = cfg.mean_session_len();
        assert!((target - 2.58).abs() < 1e-12);
        assert!((mean - target).abs() < 0.1 * target, "mean {mean}");
    }

    #[test]
    fn vocabulary_too_small_is_rejected() {
        let cfg = SynthConfig {
            vocab_terms: 30,
            ..small(10)
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn odd_intent_counts_form_a_triple() {
        let cfg = SynthConfig {
            n_intents: 5,
            vocab_terms: 200,
            ..small(20)
        };
        let c = generate(&cfg).unwrap();
        assert_eq!(c.model.families.len(), 2);
        assert_eq!(c.model.siblings(4).len(), 2);
    }

    #[test]
    fn split_sizes_and_partition() {
        let c = generate(&small(10)).unwrap();
        let parts = split(&c.sessions, &[0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), [8, 1, 1]);
        let mut ids: Vec<String> = parts.iter().flatten().map(|s| s.session_id.clone()).collect();
        ids.sort();
        let mut all: Vec<String> = c.sessions.iter().map(|s| s.session_id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
        assert_eq!(parts, split(&c.sessions, &[0.8, 0.1, 0.1], 3).unwrap());
        assert!(split(&c.sessions[..2], &[0.8, 0.1, 0.1], 3).is_err());
        assert!(split(&c.sessions, &[0.5, 0.6], 3).is_err());
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let cfg = SynthConfig {
            query_len_range: (2, 5),
            seed: 9,
            ..SynthConfig::default()
        };
        let mut back = SynthConfig::default();
        config::apply_all(&mut [&mut back], &cfg.entries()).unwrap();
        assert_eq!(back, cfg);
    }
}
