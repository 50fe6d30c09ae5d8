//! Raw export dump.
//!
//! ```text
//! appwatch-export v1
//! #session <id> <app> <tags|-> <start_ts> <end_ts|-> <state>
//! <ts> <qname> <0|1> <session_id|->
//! ```
//!
//! Fields are tab-separated, lines end in LF. Session lines precede entry
//! lines; entry lines are ordered by timestamp, background before sessions on
//! equal timestamps, sessions in declaration order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use super::{
    validate_bundle_id, validate_tag, LogEntry, RecordingSession, SessionId, SessionState,
    StoreState,
};
use crate::fqdn::Fqdn;

pub const EXPORT_HEADER: &str = "appwatch-export v1";
const SESSION_PREFIX: &str = "#session";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("export line {line}: {reason}")]
pub struct ExportError {
    pub line: usize,
    pub reason: String,
}

fn err(line: usize, reason: impl Into<String>) -> ExportError {
    ExportError { line, reason: reason.into() }
}

pub(super) fn render(state: &StoreState) -> String {
    let mut out = String::new();
    out.push_str(EXPORT_HEADER);
    out.push('\n');
    for s in &state.sessions {
        let tags = if s.tags.is_empty() {
            "-".to_owned()
        } else {
            s.tags.iter().cloned().collect::<Vec<_>>().join(",")
        };
        let end = s.end_ts.map_or_else(|| "-".to_owned(), |e| e.to_string());
        let _ = writeln!(
            out,
            "{SESSION_PREFIX}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.id, s.app_bundle_id, tags, s.start_ts, end, s.state
        );
    }

    // (ts, partition, entry, session)
    let mut rows: Vec<(i64, usize, &LogEntry, Option<&SessionId>)> = state
        .background
        .iter()
        .map(|e| (e.ts, 0, e, None))
        .collect();
    for (i, s) in state.sessions.iter().enumerate() {
        rows.extend(s.entries.iter().map(|e| (e.ts, i + 1, e, Some(&s.id))));
    }
    // Stable: keeps per-partition order on equal (ts, partition).
    rows.sort_by_key(|&(ts, part, _, _)| (ts, part));
    for (_, _, e, sid) in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            e.ts,
            e.qname,
            u8::from(e.blocked),
            sid.map_or("-", SessionId::as_str)
        );
    }
    out
}

/// Parses a dump produced by [`LogStore::export_all`](super::LogStore::export_all)
/// and validates every store invariant.
pub fn parse_export(text: &str) -> Result<StoreState, ExportError> {
    let mut lines = text.split_terminator('\n').enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, EXPORT_HEADER)) => {}
        Some((n, _)) => return Err(err(n, "missing export header")),
        None => return Err(err(0, "empty dump")),
    }

    let mut state = StoreState::default();
    let mut index: HashMap<SessionId, usize> = HashMap::new();
    let mut seen_entries = false;
    for (n, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] == SESSION_PREFIX {
            if seen_entries {
                return Err(err(n, "session line after entry lines"));
            }
            let session = parse_session(n, &fields)?;
            if index.insert(session.id.clone(), state.sessions.len()).is_some() {
                return Err(err(n, format!("duplicate session {}", session.id)));
            }
            state.sessions.push(session);
            continue;
        }
        seen_entries = true;
        let [ts, qname, blocked, sid] = fields[..] else {
            return Err(err(n, "expected 4 tab-separated fields"));
        };
        let entry = LogEntry {
            ts: ts.parse().map_err(|_| err(n, "bad timestamp"))?,
            qname: Fqdn::new(qname).map_err(|e| err(n, e.to_string()))?,
            blocked: match blocked {
                "0" => false,
                "1" => true,
                _ => return Err(err(n, "blocked must be 0 or 1")),
            },
        };
        let partition = if sid == "-" {
            &mut state.background
        } else {
            let id = SessionId::new(sid).map_err(|e| err(n, e.to_string()))?;
            let &i = index.get(&id).ok_or_else(|| err(n, format!("undeclared session {id}")))?;
            let s = &state.sessions[i];
            if entry.ts < s.start_ts || s.end_ts.is_some_and(|end| entry.ts > end) {
                return Err(err(n, "entry outside its session's time span"));
            }
            &mut state.sessions[i].entries
        };
        if partition.last().is_some_and(|last| last.ts > entry.ts) {
            return Err(err(n, "entries out of order"));
        }
        partition.push(entry);
    }

    if state.sessions.iter().filter(|s| s.state == SessionState::Active).count() > 1 {
        return Err(err(0, "more than one active session"));
    }
    Ok(state)
}

fn parse_session(n: usize, fields: &[&str]) -> Result<RecordingSession, ExportError> {
    let [_, id, app, tags, start, end, state] = fields[..] else {
        return Err(err(n, "session line needs 7 fields"));
    };
    let id = SessionId::new(id).map_err(|e| err(n, e.to_string()))?;
    validate_bundle_id(app).map_err(|e| err(n, e.to_string()))?;
    let tags: BTreeSet<String> = if tags == "-" {
        BTreeSet::new()
    } else {
        tags.split(',').map(str::to_owned).collect()
    };
    for t in &tags {
        validate_tag(t).map_err(|e| err(n, e.to_string()))?;
    }
    let start_ts: i64 = start.parse().map_err(|_| err(n, "bad start timestamp"))?;
    let end_ts: Option<i64> = match end {
        "-" => None,
        e => Some(e.parse().map_err(|_| err(n, "bad end timestamp"))?),
    };
    let state = SessionState::parse(state).ok_or_else(|| err(n, "unknown session state"))?;
    match (state, end_ts) {
        (SessionState::Active, Some(_)) => return Err(err(n, "active session with end time")),
        (SessionState::Active, None) => {}
        (_, None) => return Err(err(n, "finished session without end time")),
        (_, Some(end)) if end < start_ts => return Err(err(n, "session ends before it starts")),
        _ => {}
    }
    Ok(RecordingSession {
        id,
        app_bundle_id: app.to_owned(),
        tags,
        start_ts,
        end_ts,
        entries: Vec::new(),
        state,
    })
}
