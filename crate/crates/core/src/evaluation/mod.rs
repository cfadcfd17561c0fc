//! Ranking metrics with trec_eval conventions, run/qrels I/O and the
//! session-length and query-position breakdowns.

mod trec;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

pub use trec::{quantize_score, tie_break, Qrels, RunFile, RunRow, DEFAULT_TAG};

use crate::error::{Error, Result};
use crate::session::Session;

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

/// Mean over relevant ranks `r` of precision at `r`. `None` when nothing is relevant.
pub fn average_precision(ranked: &[u8]) -> Option<f64> {
    let total = ranked.iter().filter(|&&l| l > 0).count();
    ap_with_total(ranked, total)
}

fn ap_with_total(ranked: &[u8], total_relevant: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (r, &l) in ranked.iter().enumerate() {
        if l > 0 {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

pub fn reciprocal_rank(ranked: &[u8]) -> Option<f64> {
    ranked.iter().position(|&l| l > 0).map(|r| 1.0 / (r + 1) as f64)
}

fn dcg(gains: &[f64], k: usize) -> f64 {
    gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, g)| g / ((r + 2) as f64).log2())
        .sum()
}

fn ndcg_with_ideal(gains: &[f64], ideal: &[f64], k: usize) -> Option<f64> {
    let mut ideal = ideal.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(&ideal, k);
    (best > 0.0).then(|| dcg(gains, k) / best)
}

/// NDCG@k with linear gain and `log2(rank + 1)` discount, normalized by the
/// best ordering of the same gains.
pub fn ndcg_at_k(gains: &[f64], k: usize) -> Option<f64> {
    ndcg_with_ideal(gains, gains, k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ap: f64,
    pub rr: f64,
    /// Aligned with [`MetricsReport::ks`].
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub map: f64,
    pub mrr: f64,
    pub ks: Vec<usize>,
    pub ndcg: Vec<f64>,
    pub evaluated: usize,
    /// Run queries without any relevant judgment.
    pub excluded: Vec<String>,
    pub per_query: Vec<QueryMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    fn from_queries(ks: &[usize], per_query: Vec<QueryMetrics>, excluded: Vec<String>) -> Self {
        Self {
            map: mean(per_query.iter().map(|q| q.ap)),
            mrr: mean(per_query.iter().map(|q| q.rr)),
            ndcg: (0..ks.len())
                .map(|i| mean(per_query.iter().map(|q| q.ndcg[i])))
                .collect(),
            ks: ks.to_vec(),
            evaluated: per_query.len(),
            excluded,
            per_query,
        }
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// Headline numbers without the per-query list.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("map".into(), self.map.into());
        m.insert("mrr".into(), self.mrr.into());
        for (k, v) in self.ks.iter().zip(&self.ndcg) {
            m.insert(format!("ndcg@{k}"), (*v).into());
        }
        m.insert("evaluated".into(), self.evaluated.into());
        m.insert("excluded".into(), self.excluded.len().into());
        serde_json::Value::Object(m)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut row = |name: String, v: f64| writeln!(out, "{name:<10} {v:.4}").expect("String write");
        row("MAP".into(), self.map);
        row("MRR".into(), self.mrr);
        for (k, v) in self.ks.iter().zip(&self.ndcg) {
            row(format!("NDCG@{k}"), *v);
        }
        writeln!(out, "{:<10} {}", "queries", self.evaluated).expect("String write");
        writeln!(out, "{:<10} {}", "excluded", self.excluded.len()).expect("String write");
        out
    }
}

/// Scores `run` against `qrels`. Rows are re-sorted by the tie-breaking rule,
/// AP divides by the number of judged-relevant documents, and queries with no
/// relevant judgment are excluded and listed.
pub fn evaluate(run: &RunFile, qrels: &Qrels, ks: &[usize]) -> Result<MetricsReport> {
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::Config("NDCG cutoff must be >= 1".into()));
    }
    let groups = run.by_query();
    let unknown: Vec<&str> = groups
        .iter()
        .map(|(q, _)| *q)
        .filter(|q| qrels.get(q).is_none())
        .collect();
    if !unknown.is_empty() {
        let shown: Vec<&str> = unknown.iter().take(10).copied().collect();
        return Err(Error::Data(format!(
            "{} run queries missing from qrels: {}{}",
            unknown.len(),
            shown.join(", "),
            if unknown.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (qid, rows) in groups {
        let judged = qrels.get(qid).expect("checked above");
        let total = judged.values().filter(|&&r| r > 0).count();
        if total == 0 {
            excluded.push(qid.to_string());
            continue;
        }
        let rels: Vec<u32> = rows
            .iter()
            .map(|r| judged.get(&r.doc_id).copied().unwrap_or(0))
            .collect();
        let binary: Vec<u8> = rels.iter().map(|&r| u8::from(r > 0)).collect();
        let gains: Vec<f64> = rels.iter().map(|&r| f64::from(r)).collect();
        let ideal: Vec<f64> = judged.values().map(|&r| f64::from(r)).collect();
        per_query.push(QueryMetrics {
            query_id: qid.to_string(),
            ap: ap_with_total(&binary, total).expect("total > 0"),
            rr: reciprocal_rank(&binary).unwrap_or(0.0),
            ndcg: ks
                .iter()
                .map(|&k| ndcg_with_ideal(&gains, &ideal, k).unwrap_or(0.0))
                .collect(),
        });
    }
    Ok(MetricsReport::from_queries(ks, per_query, excluded))
}

// ---------------------------------------------------------------------------
// Breakdowns by session length and query position

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryMeta {
    pub session_len: usize,
    /// 1-based position within the session.
    pub position: usize,
}

pub fn query_meta(sessions: &[Session]) -> HashMap<String, QueryMeta> {
    let mut out = HashMap::new();
    for s in sessions {
        for i in 0..s.len() {
            out.insert(
                s.query_id(i),
                QueryMeta {
                    session_len: s.len(),
                    position: i + 1,
                },
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub label: String,
    pub n: usize,
    /// `None` for empty groups.
    pub map: Option<f64>,
    pub mrr: Option<f64>,
    pub ndcg: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Breakdown {
    pub ks: Vec<usize>,
    pub length_bins: Vec<GroupMetrics>,
    pub positions: Vec<GroupMetrics>,
}

fn length_bin(len: usize) -> (usize, char) {
    match len {
        0..=2 => (0, 'S'),
        3..=4 => (1, 'M'),
        _ => (2, 'L'),
    }
}

const BIN_LABELS: [&str; 3] = ["1-2", "3-4", "5+"];
const POSITION_LABELS: [(char, usize); 3] = [('S', 2), ('M', 4), ('L', 7)];

/// Splits per-query metrics into session-length bins {1-2, 3-4, 5+} and
/// positions S1-S2, M1-M4, L1-L7. Positions past 7 in long sessions count
/// toward the length bin only.
pub fn breakdown(report: &MetricsReport, meta: &HashMap<String, QueryMeta>) -> Breakdown {
    let mut bins: Vec<Vec<&QueryMetrics>> = vec![Vec::new(); 3];
    let mut positions: BTreeMap<(usize, usize), Vec<&QueryMetrics>> = BTreeMap::new();
    for q in &report.per_query {
        let Some(m) = meta.get(&q.query_id) else {
            log::warn!("no session metadata for query {}", q.query_id);
            continue;
        };
        let (bin, _) = length_bin(m.session_len);
        bins[bin].push(q);
        if m.position <= POSITION_LABELS[bin].1 {
            positions.entry((bin, m.position)).or_default().push(q);
        }
    }
    let group = |label: String, qs: &[&QueryMetrics]| {
        let n = qs.len();
        let nonempty = n > 0;
        GroupMetrics {
            label,
            n,
            map: nonempty.then(|| mean(qs.iter().map(|q| q.ap))),
            mrr: nonempty.then(|| mean(qs.iter().map(|q| q.rr))),
            ndcg: nonempty.then(|| {
                (0..report.ks.len())
                    .map(|i| mean(qs.iter().map(|q| q.ndcg[i])))
                    .collect()
            }),
        }
    };
    let length_bins = bins
        .iter()
        .zip(BIN_LABELS)
        .map(|(qs, label)| group(label.to_string(), qs))
        .collect();
    let mut position_rows = Vec::new();
    for (bin, (prefix, max)) in POSITION_LABELS.iter().enumerate() {
        for pos in 1..=*max {
            let qs = positions.get(&(bin, pos)).map(Vec::as_slice).unwrap_or(&[]);
            position_rows.push(group(format!("{prefix}{pos}"), qs));
        }
    }
    Breakdown {
        ks: report.ks.clone(),
        length_bins,
        positions: position_rows,
    }
}

impl Breakdown {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for (title, rows) in [("session length", &self.length_bins), ("query position", &self.positions)] {
            writeln!(out, "{title:<16} {:>6} {:>8} {:>8}", "n", "MAP", "MRR").expect("String write");
            for g in rows.iter() {
                writeln!(out, "{:<16} {:>6} {:>8} {:>8}", g.label, g.n, fmt(g.map), fmt(g.mrr)).expect("String write");
            }
        }
        out
    }
}
