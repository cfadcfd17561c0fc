//! Session domain types, vocabulary, and assembly of encoder inputs.
//!
//! Two token layouts are produced here. The behavior-sequence layout used for
//! contrastive pretraining:
//!
//! ```text
//! [CLS] q1 [EOS] d1 [EOS] ... qn [EOS] dn [EOS] [SEP]
//! ```
//!
//! and the ranking layout, where the candidate document forms a second segment:
//!
//! ```text
//! [CLS] q1 [EOS] d1 [EOS] ... qn [EOS] [SEP] d [EOS] [SEP]
//! ```
//!
//! Sequences that exceed the token budget lose whole behaviors from the head.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const EOS: u32 = 4;
pub const T_MASK: u32 = 5;
pub const DEL: u32 = 6;
pub const EMPTY: u32 = 7;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 8] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOS]", "[T_MASK]", "[DEL]", "[EMPTY]",
];

pub const DEFAULT_MAX_LEN: usize = 128;

/// Whether `id` is one of the reserved special tokens.
#[inline]
pub fn is_special(id: u32) -> bool {
    (id as usize) < RESERVED.len() && id != UNK
}

/// Lowercases, splits on Unicode whitespace and strips punctuation from both
/// ends of every token. Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|raw| {
            raw.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from term frequencies. Terms below `min_freq` are
    /// left out and will encode as `[UNK]`. Ids are assigned by frequency
    /// descending, then lexicographically.
    pub fn from_counts(counts: &HashMap<String, usize>, min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(t, &c)| c >= min_freq && !RESERVED.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.clone()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    /// Restores a vocabulary from its id-ordered token list. The first eight
    /// entries must be the reserved tokens.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED.iter()).any(|(a, b)| a != b)
        {
            return Err(Error::Data("vocabulary does not start with the reserved tokens".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, terms: &[String]) -> Vec<u32> {
        terms.iter().map(|t| self.id(t)).collect()
    }

    /// Encodes a behavior sequence; a missing clicked document becomes `[EMPTY]`.
    pub fn encode_sequence(&self, seq: &BehaviorSequence) -> Vec<EncodedBehavior> {
        seq.behaviors
            .iter()
            .map(|b| EncodedBehavior {
                query: self.encode(&b.query.tokens),
                doc: match &b.clicked_doc {
                    Some(d) => self.encode(&d.title_tokens),
                    None => vec![EMPTY],
                },
            })
            .collect()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        Self::from_token_list(text.lines().map(str::to_string).collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn render(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]").to_string())
            .collect()
    }
}

/// Builds the vocabulary over all query and clicked-document terms of `corpus`.
pub fn build_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a BehaviorSequence>,
    min_freq: usize,
) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut seen = 0usize;
    for seq in corpus {
        seen += 1;
        for b in &seq.behaviors {
            for t in &b.query.tokens {
                *counts.entry(t.clone()).or_default() += 1;
            }
            if let Some(d) = &b.clicked_doc {
                for t in &d.title_tokens {
                    *counts.entry(t.clone()).or_default() += 1;
                }
            }
        }
    }
    if seen == 0 {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    Vocab::from_counts(&counts, min_freq)
}

/// Like [`build_vocab`] but also counts the terms of unclicked candidates, so
/// ranking inputs see the same inventory as behavior sequences.
pub fn build_vocab_from_sessions(sessions: &[Session], min_freq: usize) -> Result<Vocab> {
    if sessions.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in sessions {
        for q in &s.queries {
            for t in q.query.tokens.iter().chain(q.candidates.iter().flat_map(|d| d.title_tokens.iter())) {
                *counts.entry(t.clone()).or_default() += 1;
            }
        }
    }
    Vocab::from_counts(&counts, min_freq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub tokens: Vec<String>,
    pub timestamp: i64,
}

impl Query {
    pub fn new(text: impl Into<String>, timestamp: i64) -> Result<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(Error::Data(format!("query {text:?} has no terms")));
        }
        Ok(Self {
            text,
            tokens,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub title: String,
    pub title_tokens: Vec<String>,
    pub click_label: u8,
    pub graded_relevance: Option<u8>,
}

impl Document {
    pub fn new(title: impl Into<String>, click_label: u8, graded_relevance: Option<u8>) -> Result<Self> {
        if click_label > 1 {
            return Err(Error::Data(format!("click label {click_label} is not 0 or 1")));
        }
        if let Some(r) = graded_relevance {
            if r > 4 {
                return Err(Error::Data(format!("graded relevance {r} outside 0..=4")));
            }
        }
        let title = title.into();
        Ok(Self {
            title_tokens: tokenize(&title),
            title,
            click_label,
            graded_relevance,
        })
    }

    /// Relevance used for evaluation: the graded label when present, else the click.
    pub fn relevance(&self) -> u8 {
        self.graded_relevance.unwrap_or(self.click_label)
    }
}

/// One query and its satisfied click. `None` stands for the `[EMPTY]`
/// placeholder used when the query received no click.
#[derive(Debug, Clone, PartialEq)]
pub struct Behavior {
    pub query: Query,
    pub clicked_doc: Option<Document>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSequence {
    pub session_id: String,
    pub behaviors: Vec<Behavior>,
}

impl BehaviorSequence {
    /// Orders behaviors by query timestamp (stable, so equal or missing
    /// timestamps keep their given order).
    pub fn new(session_id: impl Into<String>, mut behaviors: Vec<Behavior>) -> Result<Self> {
        let session_id = session_id.into();
        if behaviors.is_empty() {
            return Err(Error::Data(format!("session {session_id} has no behaviors")));
        }
        for b in &behaviors {
            if let Some(d) = &b.clicked_doc {
                if d.click_label != 1 {
                    return Err(Error::Data(format!(
                        "session {session_id}: behavior document is not a click"
                    )));
                }
            }
        }
        behaviors.sort_by_key(|b| b.query.timestamp);
        Ok(Self {
            session_id,
            behaviors,
        })
    }

    pub fn len(&self) -> usize {
        self.behaviors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behaviors.is_empty()
    }
}

/// A query as it appears in the log, with its retrieved candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedQuery {
    pub query: Query,
    pub candidates: Vec<Document>,
}

impl LoggedQuery {
    /// The first clicked candidate in retrieval order.
    pub fn first_click(&self) -> Option<&Document> {
        self.candidates.iter().find(|d| d.click_label == 1)
    }

    pub fn behavior(&self) -> Behavior {
        Behavior {
            query: self.query.clone(),
            clicked_doc: self.first_click().cloned(),
        }
    }
}

/// A whole logged session: the unit stored in the canonical JSONL format.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub queries: Vec<LoggedQuery>,
}

impl Session {
    pub fn new(session_id: impl Into<String>, mut queries: Vec<LoggedQuery>) -> Result<Self> {
        let session_id = session_id.into();
        if queries.is_empty() {
            return Err(Error::Data(format!("session {session_id} has no queries")));
        }
        queries.sort_by_key(|q| q.query.timestamp);
        Ok(Self {
            session_id,
            queries,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// The full behavior sequence `H_n` of this session.
    pub fn behavior_sequence(&self) -> BehaviorSequence {
        self.history(self.queries.len())
    }

    /// Behaviors of the first `n` queries.
    pub fn history(&self, n: usize) -> BehaviorSequence {
        BehaviorSequence {
            session_id: self.session_id.clone(),
            behaviors: self.queries[..n].iter().map(LoggedQuery::behavior).collect(),
        }
    }

    /// Query id used in run files and qrels: `<session_id>_<position>` with a
    /// 1-based position.
    pub fn query_id(&self, index: usize) -> String {
        format!("{}_{}", self.session_id, index + 1)
    }
}

/// Document id of the `index`-th candidate of a query, zero-padded so that
/// lexicographic order follows retrieval order.
pub fn candidate_id(index: usize) -> String {
    format!("d{index:03}")
}

// ---------------------------------------------------------------------------
// Canonical JSONL session log

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateRecord {
    title: String,
    click: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relevance: Option<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueryRecord {
    text: String,
    #[serde(default)]
    timestamp: i64,
    candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionRecord {
    session_id: String,
    queries: Vec<QueryRecord>,
}

impl From<&Session> for SessionRecord {
    fn from(s: &Session) -> Self {
        SessionRecord {
            session_id: s.session_id.clone(),
            queries: s
                .queries
                .iter()
                .map(|q| QueryRecord {
                    text: q.query.text.clone(),
                    timestamp: q.query.timestamp,
                    candidates: q
                        .candidates
                        .iter()
                        .map(|d| CandidateRecord {
                            title: d.title.clone(),
                            click: d.click_label,
                            relevance: d.graded_relevance,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl SessionRecord {
    fn into_session(self) -> Result<Option<Session>> {
        let mut queries = Vec::with_capacity(self.queries.len());
        for q in self.queries {
            let query = match Query::new(q.text, q.timestamp) {
                Ok(query) => query,
                Err(e) => {
                    log::warn!("session {}: dropping query: {e}", self.session_id);
                    continue;
                }
            };
            let candidates = q
                .candidates
                .into_iter()
                .map(|c| Document::new(c.title, c.click, c.relevance))
                .collect::<Result<Vec<_>>>()?;
            queries.push(LoggedQuery { query, candidates });
        }
        if queries.is_empty() {
            log::warn!("session {}: no usable queries, dropped", self.session_id);
            return Ok(None);
        }
        Session::new(self.session_id, queries).map(Some)
    }
}

pub fn session_to_json(session: &Session) -> String {
    serde_json::to_string(&SessionRecord::from(session)).expect("session records always serialize")
}

/// Parses canonical JSONL text. `origin` is used in error messages.
pub fn parse_sessions(text: &str, origin: &Path) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SessionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(s) = record.into_session()? {
            out.push(s);
        }
    }
    Ok(out)
}

pub fn read_sessions(path: &Path) -> Result<Vec<Session>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_sessions(&text, path)
}

pub fn write_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sessions {
        writeln!(w, "{}", session_to_json(s)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Encoder inputs

/// A behavior after vocabulary lookup. Augmentation operates on this form, so
/// the token lists may contain `[T_MASK]`, `[DEL]` or `[EMPTY]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedBehavior {
    pub query: Vec<u32>,
    pub doc: Vec<u32>,
}

impl EncodedBehavior {
    /// Tokens this behavior occupies in an assembled sequence, including the
    /// two `[EOS]` markers.
    pub fn footprint(&self) -> usize {
        self.query.len() + self.doc.len() + 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub positions: Vec<u32>,
    pub attn_mask: Vec<u8>,
}

impl TokenSequence {
    fn padded(ids: Vec<u32>, segments: Vec<u8>, max_len: usize) -> Self {
        debug_assert_eq!(ids.len(), segments.len());
        debug_assert!(ids.len() <= max_len);
        let real = ids.len();
        let mut ids = ids;
        let mut segments = segments;
        ids.resize(max_len, PAD);
        segments.resize(max_len, 0);
        let attn_mask = (0..max_len).map(|i| u8::from(i < real)).collect();
        TokenSequence {
            ids,
            segments,
            positions: (0..max_len as u32).collect(),
            attn_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding tokens.
    pub fn real_len(&self) -> usize {
        self.attn_mask.iter().filter(|&&m| m == 1).count()
    }
}

fn x_len(behaviors: &[EncodedBehavior]) -> usize {
    2 + behaviors.iter().map(EncodedBehavior::footprint).sum::<usize>()
}

/// Drops whole behaviors from the front until the assembled behavior-sequence
/// layout fits in `budget` tokens. The final behavior is always kept.
pub fn truncate_head_encoded(behaviors: &[EncodedBehavior], budget: usize) -> &[EncodedBehavior] {
    let mut total = x_len(behaviors);
    let mut start = 0;
    while total > budget && behaviors.len() - start > 1 {
        total -= behaviors[start].footprint();
        start += 1;
    }
    &behaviors[start..]
}

/// [`truncate_head_encoded`] over the string-level sequence.
pub fn truncate_head(h: &BehaviorSequence, budget: usize, vocab: &Vocab) -> BehaviorSequence {
    let encoded = vocab.encode_sequence(h);
    let kept = truncate_head_encoded(&encoded, budget).len();
    BehaviorSequence {
        session_id: h.session_id.clone(),
        behaviors: h.behaviors[h.len() - kept..].to_vec(),
    }
}

/// Cuts `first` then `second` from the tail, each down to one token, until
/// `overflow` tokens are removed. Returns how many tokens were removed.
fn cut_tails(first: &mut Vec<u32>, second: &mut Vec<u32>, overflow: usize) -> usize {
    let mut removed = 0;
    for part in [first, second] {
        let can = part.len().saturating_sub(1).min(overflow - removed);
        part.truncate(part.len() - can);
        removed += can;
        if removed == overflow {
            break;
        }
    }
    removed
}

/// Assembles the pretraining layout from an encoded behavior sequence.
pub fn assemble_x_encoded(behaviors: &[EncodedBehavior], max_len: usize) -> TokenSequence {
    assert!(!behaviors.is_empty(), "behavior sequence must be non-empty");
    let kept = truncate_head_encoded(behaviors, max_len);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    let total = x_len(kept);
    if total > max_len {
        // a lone behavior that does not fit: shorten document, then query
        let mut b = kept[0].clone();
        cut_tails(&mut b.doc, &mut b.query, total - max_len);
        push_behavior(&mut ids, &b);
    } else {
        for b in kept {
            push_behavior(&mut ids, b);
        }
    }
    ids.push(SEP);
    let segments = vec![0; ids.len()];
    TokenSequence::padded(ids, segments, max_len)
}

fn push_behavior(ids: &mut Vec<u32>, b: &EncodedBehavior) {
    ids.extend_from_slice(&b.query);
    ids.push(EOS);
    ids.extend_from_slice(&b.doc);
    ids.push(EOS);
}

pub fn assemble_x(h: &BehaviorSequence, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assemble_x_encoded(&vocab.encode_sequence(h), max_len)
}

/// Assembles the ranking layout: history and current query in segment 0, the
/// candidate document in segment 1.
pub fn assemble_y_encoded(
    history: &[EncodedBehavior],
    query: &[u32],
    doc: &[u32],
    max_len: usize,
) -> TokenSequence {
    let fixed = query.len() + doc.len() + 5;
    let mut budget_used = fixed + history.iter().map(EncodedBehavior::footprint).sum::<usize>();
    let mut start = 0;
    while budget_used > max_len && start < history.len() {
        budget_used -= history[start].footprint();
        start += 1;
    }
    let mut query = query.to_vec();
    let mut doc = doc.to_vec();
    if budget_used > max_len {
        cut_tails(&mut doc, &mut query, budget_used - max_len);
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for b in &history[start..] {
        push_behavior(&mut ids, b);
    }
    ids.extend_from_slice(&query);
    ids.push(EOS);
    ids.push(SEP);
    let first_segment = ids.len();
    ids.extend_from_slice(&doc);
    ids.push(EOS);
    ids.push(SEP);
    let mut segments = vec![0u8; first_segment];
    segments.resize(ids.len(), 1);
    TokenSequence::padded(ids, segments, max_len)
}

pub fn assemble_y(
    history: &BehaviorSequence,
    query: &Query,
    doc: &Document,
    vocab: &Vocab,
    max_len: usize,
) -> TokenSequence {
    let encoded = vocab.encode_sequence(history);
    assemble_y_encoded(
        &encoded,
        &vocab.encode(&query.tokens),
        &vocab.encode(&doc.title_tokens),
        max_len,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(text: &str) -> Query {
        Query::new(text, 0).unwrap()
    }

    fn d(text: &str) -> Document {
        Document::new(text, 1, None).unwrap()
    }

    fn seq(pairs: &[(&str, Option<&str>)]) -> BehaviorSequence {
        BehaviorSequence::new(
            "s",
            pairs
                .iter()
                .map(|(qt, dt)| Behavior {
                    query: q(qt),
                    clicked_doc: dt.map(d),
                })
                .collect(),
        )
        .unwrap()
    }

    fn vocab_for(h: &BehaviorSequence) -> Vocab {
        build_vocab([h], 1).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Cheap Flights"), vec!["cheap", "flights"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  boston,  MA "), vec!["boston", "ma"]);
        assert_eq!(tokenize("\"quoted\" ... (x)"), vec!["quoted", "x"]);
    }

    #[test]
    fn vocab_threshold_and_reserved_layout() {
        let h = seq(&[("a a a", Some("b"))]);
        let v = build_vocab([&h], 2).unwrap();
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i as u32);
        }
        assert!(v.contains("a"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.len(), 9);
        assert_eq!(build_vocab([&h], 2).unwrap(), v);
    }

    #[test]
    fn vocab_order_is_freq_then_lexicographic() {
        let h = seq(&[("z y y x", Some("x w"))]);
        let v = build_vocab([&h], 1).unwrap();
        assert_eq!(&v.tokens()[8..], &["x", "y", "w", "z"]);
    }

    #[test]
    fn vocab_rejects_empty_corpus_and_zero_min_freq() {
        assert!(build_vocab(std::iter::empty(), 1).is_err());
        let h = seq(&[("a", None)]);
        assert!(build_vocab([&h], 0).is_err());
    }

    #[test]
    fn assemble_x_layout_and_padding() {
        let h = seq(&[("a b", Some("c"))]);
        let v = vocab_for(&h);
        let x = assemble_x(&h, &v, 64);
        let expected: Vec<u32> = vec![CLS, v.id("a"), v.id("b"), EOS, v.id("c"), EOS, SEP];
        assert_eq!(&x.ids[..7], &expected[..]);
        assert_eq!(x.ids.len(), 64);
        assert!(x.ids[7..].iter().all(|&i| i == PAD));
        assert_eq!(x.attn_mask.iter().map(|&m| m as usize).sum::<usize>(), 7);
        assert!(x.segments.iter().all(|&s| s == 0));
        assert_eq!(x.positions[63], 63);
    }

    #[test]
    fn assemble_x_uses_empty_placeholder() {
        let h = seq(&[("a", None)]);
        let v = vocab_for(&h);
        let x = assemble_x(&h, &v, 16);
        assert_eq!(&x.ids[..6], &[CLS, v.id("a"), EOS, EMPTY, EOS, SEP]);
    }

    #[test]
    fn assemble_x_truncates_lone_oversized_behavior() {
        let long_doc = (0..20).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let h = seq(&[("a b c", Some(&long_doc))]);
        let v = vocab_for(&h);
        let x = assemble_x(&h, &v, 10);
        assert_eq!(x.real_len(), 10);
        // [CLS] a b c [EOS] w0 w1 w2 [EOS] [SEP]
        assert_eq!(x.ids[0], CLS);
        assert_eq!(&x.ids[1..4], &[v.id("a"), v.id("b"), v.id("c")]);
        assert_eq!(x.ids[4], EOS);
        assert_eq!(&x.ids[5..8], &[v.id("w0"), v.id("w1"), v.id("w2")]);
        assert_eq!(&x.ids[8..10], &[EOS, SEP]);

        // very tight budget also shortens the query, keeping one token of each
        let x = assemble_x(&h, &v, 8);
        assert_eq!(&x.ids[..8], &[CLS, v.id("a"), v.id("b"), v.id("c"), EOS, v.id("w0"), EOS, SEP]);
        let x = assemble_x(&h, &v, 6);
        assert_eq!(&x.ids[..6], &[CLS, v.id("a"), EOS, v.id("w0"), EOS, SEP]);
    }

    #[test]
    fn assemble_y_layout_and_segments() {
        let h = BehaviorSequence {
            session_id: "s".into(),
            behaviors: vec![],
        };
        let v = Vocab::from_counts(&HashMap::from([("a".to_string(), 1), ("b".to_string(), 1)]), 1).unwrap();
        let y = assemble_y(&h, &q("a"), &d("b"), &v, 16);
        assert_eq!(&y.ids[..7], &[CLS, v.id("a"), EOS, SEP, v.id("b"), EOS, SEP]);
        assert_eq!(&y.segments[..7], &[0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(y, assemble_y(&h, &q("a"), &d("b"), &v, 16));
    }

    #[test]
    fn assemble_y_pops_oldest_history() {
        // 40 behaviors of 4 tokens each (q, EOS, d, EOS)
        let pairs: Vec<(String, String)> = (0..40).map(|i| (format!("q{i}"), format!("d{i}"))).collect();
        let h = seq(&pairs.iter().map(|(a, b)| (a.as_str(), Some(b.as_str()))).collect::<Vec<_>>());
        let v = vocab_for(&h);
        let y = assemble_y(&h, &q("q40"), &d("d0"), &v, 128);
        // 7 fixed tokens leave room for 30 history behaviors
        assert_eq!(y.real_len(), 127);
        assert_eq!(y.ids[1], v.id("q10"));
        let sep = y.ids.iter().filter(|&&i| i == SEP).count();
        assert_eq!(sep, 2);
        assert_eq!(y.ids[126], SEP);
        assert_eq!(y.ids[124], v.id("d0"));
    }

    #[test]
    fn assemble_y_truncates_oversized_candidate() {
        let h = BehaviorSequence {
            session_id: "s".into(),
            behaviors: vec![],
        };
        let long = (0..30).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let v = Vocab::from_counts(&HashMap::from([("w0".to_string(), 1)]), 1).unwrap();
        let y = assemble_y(&h, &q("a b"), &d(&long), &v, 12);
        assert_eq!(y.real_len(), 12);
        assert_eq!(y.ids.iter().filter(|&&i| i == SEP).count(), 2);
        assert_eq!(y.ids[11], SEP);
        assert_eq!(y.ids[10], EOS);
    }

    #[test]
    fn truncate_head_semantics() {
        let h = seq(&[("a", Some("b")), ("c", Some("d")), ("e", Some("f"))]);
        let v = vocab_for(&h);
        assert_eq!(truncate_head(&h, 128, &v), h);
        // each behavior is 4 tokens; two behaviors plus [CLS]/[SEP] = 10
        let t = truncate_head(&h, 10, &v);
        assert_eq!(t.behaviors, h.behaviors[1..].to_vec());
        let big = seq(&[("a b c d e f g h i j", Some("k l m n o p"))]);
        let vb = vocab_for(&big);
        assert_eq!(truncate_head(&big, 8, &vb), big);
    }

    #[test]
    fn sequences_are_ordered_by_timestamp() {
        let b = |t: &str, ts| Behavior {
            query: Query::new(t, ts).unwrap(),
            clicked_doc: None,
        };
        let s = BehaviorSequence::new("s", vec![b("late", 30), b("early", 10)]).unwrap();
        assert_eq!(s.behaviors[0].query.text, "early");
    }

    #[test]
    fn rejects_invalid_labels_and_empty_queries() {
        assert!(Document::new("x", 2, None).is_err());
        assert!(Document::new("x", 1, Some(5)).is_err());
        assert!(Query::new("  ,, ", 0).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_first_click() {
        let line = r#"{"session_id":"s1","queries":[{"text":"Cheap flights","timestamp":5,"candidates":[{"title":"a","click":0},{"title":"b","click":1},{"title":"c","click":1,"relevance":3}]}]}"#;
        let sessions = parse_sessions(line, Path::new("mem")).unwrap();
        assert_eq!(sessions.len(), 1);
        let s = &sessions[0];
        assert_eq!(s.queries[0].first_click().unwrap().title, "b");
        assert_eq!(s.queries[0].candidates[2].relevance(), 3);
        assert_eq!(session_to_json(s), line);
    }

    #[test]
    fn jsonl_parse_error_reports_line() {
        let text = "{\"session_id\":\"s\",\"queries\":[]}\nnot json\n";
        match parse_sessions(text, Path::new("f.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = vocab_for(&seq(&[("a b", Some("c")), ("b", None)]));
        let back = Vocab::parse_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(matches!(Vocab::parse_text("a\nb\n"), Err(Error::Data(_))));
    }
}
