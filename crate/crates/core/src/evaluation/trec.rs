//! TREC run files (`qid Q0 docid rank score tag`) and qrels (`qid 0 docid rel`).

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::session::{candidate_id, Session};

pub const DEFAULT_TAG: &str = "coca";

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// Score descending, then doc_id descending.
pub fn tie_break(a: &RunRow, b: &RunRow) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| b.doc_id.cmp(&a.doc_id))
}

/// Rounds to the 6 decimals written to run files, so in-memory scores and
/// their text form tie identically.
pub fn quantize_score(s: f64) -> f64 {
    (s * 1e6).round() / 1e6
}

/// Ranked rows, grouped by query in order of first appearance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    pub rows: Vec<RunRow>,
}

impl RunFile {
    /// Builds a normalized run from unranked `(query_id, doc_id, score)` triples.
    pub fn from_scores(tag: &str, scores: impl IntoIterator<Item = (String, String, f64)>) -> Self {
        let rows = scores
            .into_iter()
            .map(|(query_id, doc_id, score)| RunRow {
                query_id,
                doc_id,
                rank: 0,
                score,
                tag: tag.to_string(),
            })
            .collect();
        let mut run = RunFile { rows };
        run.normalize();
        run
    }

    /// Sorts each query's rows by the tie-breaking order and rewrites ranks
    /// as 1..C.
    pub fn normalize(&mut self) {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<RunRow>> = HashMap::new();
        for row in self.rows.drain(..) {
            let g = groups.entry(row.query_id.clone()).or_insert_with(|| {
                order.push(row.query_id.clone());
                Vec::new()
            });
            g.push(row);
        }
        for qid in order {
            let mut g = groups.remove(&qid).unwrap_or_default();
            g.sort_by(tie_break);
            for (i, row) in g.iter_mut().enumerate() {
                row.rank = i + 1;
            }
            self.rows.extend(g);
        }
    }

    pub fn query_ids(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for row in &self.rows {
            if out.last() != Some(&row.query_id.as_str()) {
                out.push(&row.query_id);
            }
        }
        out
    }

    /// Rows per query in normalized order.
    pub fn by_query(&self) -> Vec<(&str, Vec<&RunRow>)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut out: Vec<(&str, Vec<&RunRow>)> = Vec::new();
        for row in &self.rows {
            let slot = *index.entry(&row.query_id).or_insert_with(|| {
                out.push((&row.query_id, Vec::new()));
                out.len() - 1
            });
            out[slot].1.push(row);
        }
        for (_, rows) in &mut out {
            rows.sort_by(|a, b| tie_break(a, b));
        }
        out
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(out, "{} Q0 {} {} {:.6} {}", r.query_id, r.doc_id, r.rank, r.score, r.tag)
                .expect("writing to a String");
        }
        out
    }

    /// Parses run text and normalizes ranks to the tie-broken order.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 columns, found {}", f.len())));
            }
            let rank = f[3].parse().map_err(|_| err(format!("bad rank {:?}", f[3])))?;
            let score: f64 = f[4].parse().map_err(|_| err(format!("bad score {:?}", f[4])))?;
            if !score.is_finite() {
                return Err(err(format!("non-finite score {:?}", f[4])));
            }
            rows.push(RunRow {
                query_id: f[0].to_string(),
                doc_id: f[2].to_string(),
                rank,
                score,
                tag: f[5].to_string(),
            });
        }
        let mut run = RunFile { rows };
        run.normalize();
        Ok(run)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_trec_string()).map_err(|e| Error::io(path, e))
    }
}

/// Relevance judgments keyed by query then document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, rel: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), rel);
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Judgments for every candidate of every query: graded relevance when
    /// present, otherwise the click.
    pub fn from_sessions(sessions: &[Session]) -> Self {
        let mut q = Qrels::default();
        for s in sessions {
            for (i, lq) in s.queries.iter().enumerate() {
                for (j, d) in lq.candidates.iter().enumerate() {
                    q.insert(s.query_id(i), candidate_id(j), u32::from(d.relevance()));
                }
            }
        }
        q
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (qid, docs) in &self.judgments {
            for (doc, rel) in docs {
                writeln!(out, "{qid} 0 {doc} {rel}").expect("writing to a String");
            }
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut q = Qrels::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 columns, found {}", f.len())));
            }
            let rel: u32 = f[3]
                .parse()
                .map_err(|_| err(format!("relevance {:?} is not a non-negative integer", f[3])))?;
            q.insert(f[0], f[2], rel);
        }
        Ok(q)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_trec_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("run.txt")
    }

    #[test]
    fn one_row_format() {
        let run = RunFile::from_scores("coca", [("q1".to_string(), "d7".to_string(), 0.913)]);
        assert_eq!(run.to_trec_string(), "q1 Q0 d7 1 0.913000 coca\n");
    }

    #[test]
    fn ties_order_by_doc_id_descending() {
        let run = RunFile::from_scores(
            "t",
            [
                ("q".into(), "d1".into(), 0.5),
                ("q".into(), "d3".into(), 0.5),
                ("q".into(), "d2".into(), 0.9),
            ],
        );
        let docs: Vec<&str> = run.rows.iter().map(|r| r.doc_id.as_str()).collect();
        assert_eq!(docs, ["d2", "d3", "d1"]);
        assert_eq!(run.rows.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn read_rewrites_ranks() {
        let text = "q1 Q0 a 7 0.1 x\nq1 Q0 b 3 0.9 x\n";
        let run = RunFile::parse(text, p()).unwrap();
        assert_eq!(run.rows[0].doc_id, "b");
        assert_eq!(run.rows[0].rank, 1);
        assert_eq!(run.rows[1].rank, 2);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = RunFile::parse("q1 Q0 a 1 0.5 x\nq1 Q0 b 2 zz x\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = Qrels::parse("q 0 d 1\nq 0 d\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(Qrels::parse("q 0 d -1\n", p()).is_err());
    }

    #[test]
    fn qrels_round_trip() {
        let mut q = Qrels::default();
        q.insert("s_1", "d000", 1);
        q.insert("s_1", "d001", 0);
        q.insert("s_2", "d000", 3);
        assert_eq!(Qrels::parse(&q.to_trec_string(), p()).unwrap(), q);
    }

    proptest! {
        #[test]
        fn run_round_trip(rows in prop::collection::vec((0u8..4, 0u8..6, 0u32..20), 1..40)) {
            let run = RunFile::from_scores(
                "r",
                rows.iter().map(|&(q, d, s)| (format!("q{q}"), format!("d{d}"), quantize_score(f64::from(s) / 7.0))),
            );
            let back = RunFile::parse(&run.to_trec_string(), p()).unwrap();
            prop_assert_eq!(back, run);
        }
    }
}
