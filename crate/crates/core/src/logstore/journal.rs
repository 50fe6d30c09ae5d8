//! On-disk append log backing a [`LogStore`](super::LogStore).
//!
//! One JSON record per line. Appends are single `write` calls of a full line;
//! a torn final line left by a crash is dropped on replay. Destructive
//! operations (sanitize, purge, delete) rewrite the whole file through a
//! temporary file and rename, so removed names never survive on disk.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{LogEntry, RecordingSession, SessionId, SessionState, StoreError, StoreState};
use crate::fqdn::Fqdn;

const FORMAT: &str = "appwatch-journal";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        v: u32,
    },
    /// Creates a session or replaces its metadata.
    Session {
        id: SessionId,
        app: String,
        tags: BTreeSet<String>,
        start_ts: i64,
        end_ts: Option<i64>,
        state: SessionState,
    },
    Entry {
        ts: i64,
        qname: Fqdn,
        blocked: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<SessionId>,
    },
}

fn session_record(s: &RecordingSession) -> Record {
    Record::Session {
        id: s.id.clone(),
        app: s.app_bundle_id.clone(),
        tags: s.tags.clone(),
        start_ts: s.start_ts,
        end_ts: s.end_ts,
        state: s.state,
    }
}

fn entry_record(e: &LogEntry, session: Option<&SessionId>) -> Record {
    Record::Entry { ts: e.ts, qname: e.qname.clone(), blocked: e.blocked, session: session.cloned() }
}

fn encode(record: &Record) -> String {
    let mut line = serde_json::to_string(record).expect("journal records always serialize");
    line.push('\n');
    line
}

#[derive(Debug)]
pub(super) struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens or creates the journal at `path` and replays it.
    pub(super) fn open(path: &Path) -> Result<(Self, StoreState), StoreError> {
        let state = if path.exists() {
            replay(&fs::read_to_string(path)?)?
        } else {
            StoreState::default()
        };
        // Rewrite once so a dropped torn tail never gets appended onto.
        write_snapshot(path, &state)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok((Journal { path: path.to_owned(), file }, state))
    }

    pub(super) fn append_entry(&mut self, e: &LogEntry, session: Option<&SessionId>) -> io::Result<()> {
        self.file.write_all(encode(&entry_record(e, session)).as_bytes())
    }

    pub(super) fn append_session(&mut self, s: &RecordingSession) -> io::Result<()> {
        self.file.write_all(encode(&session_record(s)).as_bytes())?;
        self.file.sync_data()
    }

    pub(super) fn compact(&mut self, state: &StoreState) -> io::Result<()> {
        write_snapshot(&self.path, state)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

fn write_snapshot(path: &Path, state: &StoreState) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(encode(&Record::Header { format: FORMAT.to_owned(), v: VERSION }).as_bytes())?;
        for s in &state.sessions {
            w.write_all(encode(&session_record(s)).as_bytes())?;
        }
        for e in &state.background {
            w.write_all(encode(&entry_record(e, None)).as_bytes())?;
        }
        for s in &state.sessions {
            for e in &s.entries {
                w.write_all(encode(&entry_record(e, Some(&s.id))).as_bytes())?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn replay(text: &str) -> Result<StoreState, StoreError> {
    let mut state = StoreState::default();
    let mut index: HashMap<SessionId, usize> = HashMap::new();
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let n = i + 1;
        let record: Record = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) if n == lines.len() && !complete => {
                warn!(line = n, "dropping torn journal tail");
                break;
            }
            Err(e) => return Err(StoreError::Corrupt { line: n, reason: e.to_string() }),
        };
        match record {
            Record::Header { format, v } => {
                if format != FORMAT || v != VERSION {
                    return Err(StoreError::Corrupt { line: n, reason: format!("unsupported format {format} v{v}") });
                }
            }
            Record::Session { id, app, tags, start_ts, end_ts, state: st } => match index.get(&id) {
                Some(&at) => {
                    let s = &mut state.sessions[at];
                    s.app_bundle_id = app;
                    s.tags = tags;
                    s.start_ts = start_ts;
                    s.end_ts = end_ts;
                    s.state = st;
                }
                None => {
                    index.insert(id.clone(), state.sessions.len());
                    state.sessions.push(RecordingSession {
                        id,
                        app_bundle_id: app,
                        tags,
                        start_ts,
                        end_ts,
                        entries: Vec::new(),
                        state: st,
                    });
                }
            },
            Record::Entry { ts, qname, blocked, session } => {
                let entry = LogEntry { ts, qname, blocked };
                match session {
                    None => state.background.push(entry),
                    Some(id) => {
                        let &at = index.get(&id).ok_or_else(|| StoreError::Corrupt {
                            line: n,
                            reason: format!("entry for undeclared session {id}"),
                        })?;
                        state.sessions[at].entries.push(entry);
                    }
                }
            }
        }
    }
    Ok(state)
}
