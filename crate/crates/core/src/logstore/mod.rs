//! Persistent store of captured queries and recording sessions.
//!
//! Background entries (captured while no recording runs) and recording
//! entries live in the same store, partitioned by session. All timestamps are
//! whole unix seconds.

mod export;
mod journal;
mod store;

use std::collections::BTreeSet;
use std::fmt;
use std::num::NonZeroU64;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fqdn::Fqdn;

pub use export::{parse_export, ExportError, EXPORT_HEADER};
pub use store::LogStore;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogEntry {
    pub ts: i64,
    pub qname: Fqdn,
    pub blocked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SessionId(String);

impl SessionId {
    pub fn new(id: &str) -> Result<Self, StoreError> {
        if !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-') {
            Ok(SessionId(id.to_owned()))
        } else {
            Err(StoreError::InvalidSessionId(id.to_owned()))
        }
    }

    pub(crate) fn generate() -> Self {
        let uuid = uuid::Uuid::now_v7().simple().to_string();
        // Tail of a v7 uuid is random; twelve hex chars are plenty for one device.
        SessionId(uuid[20..].to_owned())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SessionId {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        SessionId::new(&s)
    }
}

impl From<SessionId> for String {
    fn from(id: SessionId) -> Self {
        id.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Active,
    Stopped,
    Sanitized,
    Uploaded,
}

impl SessionState {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Active => "active",
            SessionState::Stopped => "stopped",
            SessionState::Sanitized => "sanitized",
            SessionState::Uploaded => "uploaded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "active" => SessionState::Active,
            "stopped" => SessionState::Stopped,
            "sanitized" => SessionState::Sanitized,
            "uploaded" => SessionState::Uploaded,
            _ => return None,
        })
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingSession {
    pub id: SessionId,
    pub app_bundle_id: String,
    pub tags: BTreeSet<String>,
    pub start_ts: i64,
    pub end_ts: Option<i64>,
    pub entries: Vec<LogEntry>,
    pub state: SessionState,
}

impl RecordingSession {
    pub fn duration_s(&self) -> Option<i64> {
        self.end_ts.map(|end| end - self.start_ts)
    }

    /// Distinct names in the recording with their request counts, by name.
    pub fn name_counts(&self) -> Vec<(Fqdn, usize)> {
        let mut counts = std::collections::BTreeMap::<&Fqdn, usize>::new();
        for e in &self.entries {
            *counts.entry(&e.qname).or_default() += 1;
        }
        counts.into_iter().map(|(k, v)| (k.clone(), v)).collect()
    }
}

/// Complete logical content of a store; what export and import preserve.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreState {
    pub background: Vec<LogEntry>,
    pub sessions: Vec<RecordingSession>,
}

impl StoreState {
    /// Every entry, background and recorded, ordered by timestamp.
    pub fn all_entries(&self) -> Vec<LogEntry> {
        let mut all: Vec<LogEntry> = self
            .background
            .iter()
            .chain(self.sessions.iter().flat_map(|s| s.entries.iter()))
            .cloned()
            .collect();
        all.sort_by_key(|e| e.ts);
        all
    }

    pub fn entry_count(&self) -> usize {
        self.background.len() + self.sessions.iter().map(|s| s.entries.len()).sum::<usize>()
    }

    /// Resolves a full session id or a unique prefix of one.
    pub fn resolve_session(&self, id_or_prefix: &str) -> Result<SessionId, StoreError> {
        if let Some(s) = self.sessions.iter().find(|s| s.id.as_str() == id_or_prefix) {
            return Ok(s.id.clone());
        }
        let hits: Vec<&SessionId> = self
            .sessions
            .iter()
            .map(|s| &s.id)
            .filter(|id| !id_or_prefix.is_empty() && id.as_str().starts_with(id_or_prefix))
            .collect();
        match hits[..] {
            [one] => Ok(one.clone()),
            [] => Err(StoreError::UnknownSession(id_or_prefix.to_owned())),
            _ => Err(StoreError::AmbiguousSession(id_or_prefix.to_owned())),
        }
    }

    pub fn session(&self, id: &SessionId) -> Option<&RecordingSession> {
        self.sessions.iter().find(|s| &s.id == id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    max_age: Option<NonZeroU64>,
}

impl RetentionPolicy {
    pub fn keep_forever() -> Self {
        RetentionPolicy { max_age: None }
    }

    pub fn max_age_secs(secs: u64) -> Result<Self, StoreError> {
        NonZeroU64::new(secs)
            .map(|n| RetentionPolicy { max_age: Some(n) })
            .ok_or(StoreError::InvalidRetention)
    }

    pub fn max_age(&self) -> Option<u64> {
        self.max_age.map(NonZeroU64::get)
    }
}

/// Whether a recording is running; read by the proxy on every query.
#[derive(Debug, Clone, Default)]
pub struct RecordingFlag(Arc<AtomicBool>);

impl RecordingFlag {
    pub fn is_active(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub(crate) fn set(&self, active: bool) {
        self.0.store(active, Ordering::SeqCst);
    }
}

/// Notifications published by the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StoreEvent {
    Entry(LogEntry),
    /// User-set filters are suspended from now on.
    RecordingStarted { id: SessionId, app_bundle_id: String, start_ts: i64 },
    RecordingStopped { id: SessionId, end_ts: i64 },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("a recording is already active ({0})")]
    RecordingAlreadyActive(SessionId),
    #[error("session {0} is not active")]
    NotActive(SessionId),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session id prefix {0} is ambiguous")]
    AmbiguousSession(String),
    #[error("session {id} is {state}; operation not allowed")]
    InvalidState { id: SessionId, state: SessionState },
    #[error("invalid session id {0:?}")]
    InvalidSessionId(String),
    #[error("invalid app bundle id {0:?}")]
    InvalidBundleId(String),
    #[error("invalid tag {0:?}")]
    InvalidTag(String),
    #[error("retention max age must be positive")]
    InvalidRetention,
    #[error("import requires an empty store")]
    NotEmpty,
    #[error("corrupt journal at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reverse-DNS style application identifier, e.g. `com.viber`.
pub fn validate_bundle_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 255
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'-' | b'_'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidBundleId(id.to_owned()))
    }
}

pub fn validate_tag(tag: &str) -> Result<(), StoreError> {
    let ok = !tag.is_empty()
        && tag.len() <= 64
        && tag.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'-' | b'_'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidTag(tag.to_owned()))
    }
}
