//! Tab-separated AOL-style click logs to canonical sessions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::session::{Document, LoggedQuery, Query, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    SessionId,
    QueryText,
    Timestamp,
    DocTitle,
    Click,
    Position,
    Ignore,
}

impl Column {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name.trim() {
            "session_id" => Column::SessionId,
            "query_text" => Column::QueryText,
            "timestamp" => Column::Timestamp,
            "doc_title" => Column::DocTitle,
            "click" => Column::Click,
            "position" => Column::Position,
            "_" => Column::Ignore,
            other => return Err(Error::Config(format!("unknown ingest column {other:?}"))),
        })
    }
}

/// Column layout of the input file. `position` is optional; without it
/// candidates keep file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestFormat {
    pub columns: Vec<Column>,
    pub header: bool,
}

impl Default for IngestFormat {
    fn default() -> Self {
        Self::parse("session_id,query_text,timestamp,doc_title,click,position").expect("default descriptor")
    }
}

impl IngestFormat {
    /// Comma-separated column names, `_` for columns to skip. A leading
    /// `header:` marks a header row to discard.
    pub fn parse(descriptor: &str) -> Result<Self> {
        let (header, cols) = match descriptor.strip_prefix("header:") {
            Some(rest) => (true, rest),
            None => (false, descriptor),
        };
        let columns = cols.split(',').map(Column::parse).collect::<Result<Vec<_>>>()?;
        for required in [Column::SessionId, Column::QueryText, Column::Timestamp, Column::DocTitle, Column::Click] {
            if columns.iter().filter(|&&c| c == required).count() != 1 {
                return Err(Error::Config(format!("descriptor needs exactly one {required:?} column")));
            }
        }
        if columns.iter().filter(|&&c| c == Column::Position).count() > 1 {
            return Err(Error::Config("descriptor has more than one position column".into()));
        }
        Ok(Self { columns, header })
    }

    fn index(&self, c: Column) -> Option<usize> {
        self.columns.iter().position(|&x| x == c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct IngestReport {
    pub rows: usize,
    pub sessions: usize,
    pub queries: usize,
    /// Queries without a single candidate document.
    pub dropped_queries: usize,
}

/// Integer seconds, or `YYYY-MM-DD HH:MM:SS`.
fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    s.parse::<i64>().ok().or_else(|| {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
            .ok()
            .map(|t| t.and_utc().timestamp())
    })
}

fn parse_click(s: &str) -> Option<u8> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" => Some(0),
        "1" | "true" => Some(1),
        _ => None,
    }
}

struct PendingQuery {
    text: String,
    timestamp: i64,
    docs: Vec<(usize, String, u8)>,
}

#[derive(Default)]
struct PendingSession {
    queries: Vec<PendingQuery>,
    /// (timestamp, text) -> index into `queries`
    index: HashMap<(i64, String), usize>,
}

/// Groups rows into sessions ordered by timestamp. Rows with an empty
/// `doc_title` record a query without adding a candidate. Two different
/// queries with the same timestamp in one session leave the order unknown
/// and are an error.
pub fn ingest_aol(path: &Path, format: &IngestFormat) -> Result<(Vec<Session>, IngestReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let idx = |c| format.index(c).expect("validated descriptor");
    let (sid_i, q_i, ts_i, doc_i, click_i) = (
        idx(Column::SessionId),
        idx(Column::QueryText),
        idx(Column::Timestamp),
        idx(Column::DocTitle),
        idx(Column::Click),
    );
    let pos_i = format.index(Column::Position);
    let mut order: Vec<String> = Vec::new();
    let mut sessions: HashMap<String, PendingSession> = HashMap::new();
    let mut report = IngestReport::default();
    for (n, line) in text.lines().enumerate() {
        if (n == 0 && format.header) || line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != format.columns.len() {
            return Err(err(format!("expected {} columns, found {}", format.columns.len(), f.len())));
        }
        report.rows += 1;
        let timestamp = parse_timestamp(f[ts_i]).ok_or_else(|| err(format!("bad timestamp {:?}", f[ts_i])))?;
        let click = parse_click(f[click_i]).ok_or_else(|| err(format!("bad click value {:?}", f[click_i])))?;
        let position = match pos_i {
            Some(p) if !f[p].trim().is_empty() => f[p]
                .trim()
                .parse::<usize>()
                .map_err(|_| err(format!("bad position {:?}", f[p])))?,
            _ => usize::MAX,
        };
        let sid = f[sid_i].trim().to_string();
        let query = f[q_i].trim().to_string();
        let session = sessions.entry(sid.clone()).or_insert_with(|| {
            order.push(sid.clone());
            PendingSession::default()
        });
        let key = (timestamp, query.clone());
        let qi = match session.index.get(&key) {
            Some(&i) => i,
            None => {
                if let Some(other) = session.queries.iter().find(|q| q.timestamp == timestamp) {
                    return Err(Error::Data(format!(
                        "session {sid}: queries {:?} and {query:?} share timestamp {timestamp}, order unknown",
                        other.text
                    )));
                }
                session.queries.push(PendingQuery {
                    text: query,
                    timestamp,
                    docs: Vec::new(),
                });
                session.index.insert(key, session.queries.len() - 1);
                session.queries.len() - 1
            }
        };
        let title = f[doc_i].trim();
        if !title.is_empty() {
            session.queries[qi].docs.push((position, title.to_string(), click));
        }
    }
    let mut out = Vec::new();
    for sid in order {
        let pending = sessions.remove(&sid).expect("recorded on first sight");
        let mut queries = Vec::new();
        for mut q in pending.queries {
            if q.docs.is_empty() {
                report.dropped_queries += 1;
                continue;
            }
            // stable: equal positions keep file order
            q.docs.sort_by_key(|d| d.0);
            let candidates = q
                .docs
                .into_iter()
                .map(|(_, title, click)| Document::new(title, click, None))
                .collect::<Result<Vec<_>>>()?;
            match Query::new(q.text, q.timestamp) {
                Ok(query) => queries.push(LoggedQuery { query, candidates }),
                Err(_) => report.dropped_queries += 1,
            }
        }
        if queries.is_empty() {
            continue;
        }
        report.queries += queries.len();
        out.push(Session::new(sid, queries)?);
    }
    report.sessions = out.len();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ingest(text: &str) -> Result<(Vec<Session>, IngestReport)> {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        ingest_aol(f.path(), &IngestFormat::default())
    }

    #[test]
    fn groups_rows_into_sessions() {
        let (s, r) = ingest("a\tcheap flights\t10\tflight deals\t1\t1\na\tparis hotels\t20\thotel paris\t1\t1\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].behavior_sequence().len(), 2);
        assert_eq!(r.queries, 2);
    }

    #[test]
    fn first_click_in_position_order() {
        let text = "a\tq\t10\tsecond\t1\t2\na\tq\t10\tfirst\t1\t1\na\tq\t10\tthird\t0\t3\n";
        let (s, _) = ingest(text).unwrap();
        let b = s[0].behavior_sequence();
        assert_eq!(b.behaviors[0].clicked_doc.as_ref().unwrap().title, "first");
    }

    #[test]
    fn unclicked_query_has_empty_behavior_document() {
        let (s, _) = ingest("a\tq\t10\tdoc\t0\t1\n").unwrap();
        assert!(s[0].behavior_sequence().behaviors[0].clicked_doc.is_none());
    }

    #[test]
    fn queries_without_candidates_are_dropped_and_counted() {
        let (s, r) = ingest("a\tq1\t10\t\t0\t\na\tq2\t20\tdoc\t1\t1\nb\tq3\t5\t\t0\t\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(r.dropped_queries, 2);
        assert_eq!(r.sessions, 1);
    }

    #[test]
    fn sorts_by_timestamp_and_accepts_datetimes() {
        let text = "a\tlater\t2006-03-01 07:17:12\td\t1\t1\na\tearlier\t2006-03-01 07:10:00\td\t1\t1\n";
        let (s, _) = ingest(text).unwrap();
        assert_eq!(s[0].queries[0].query.text, "earlier");
    }

    #[test]
    fn ambiguous_ordering_is_an_error() {
        let err = ingest("a\tx\t10\td\t1\t1\na\ty\t10\td\t1\t1\n").unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        assert!(matches!(ingest("a\tq\t10\td\t1\t1\na\tq\tnoon\td\t1\t1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(ingest("a\tq\t10\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn descriptor_variants() {
        let f = IngestFormat::parse("header:timestamp,session_id,_,query_text,doc_title,click").unwrap();
        assert!(f.header);
        assert_eq!(f.index(Column::Position), None);
        assert!(IngestFormat::parse("session_id,query_text").is_err());
        assert!(IngestFormat::parse("session_id,query_text,timestamp,doc_title,click,rank").is_err());
    }
}
