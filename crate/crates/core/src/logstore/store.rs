use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use tokio::sync::broadcast;

use super::export::{parse_export, render};
use super::journal::Journal;
use super::{
    validate_bundle_id, validate_tag, LogEntry, RecordingFlag, RecordingSession, RetentionPolicy,
    SessionId, SessionState, StoreError, StoreEvent, StoreState,
};
use crate::clock::Clock;
use crate::fqdn::Fqdn;

const EVENT_CAPACITY: usize = 1024;

/// Single-writer store of captured queries and recording sessions.
///
/// Wrap in a mutex to share; every method leaves the store consistent.
pub struct LogStore {
    state: StoreState,
    journal: Option<Journal>,
    clock: Arc<dyn Clock>,
    recording: RecordingFlag,
    events: broadcast::Sender<StoreEvent>,
    last_ts: i64,
}

impl std::fmt::Debug for LogStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogStore")
            .field("entries", &self.state.entry_count())
            .field("sessions", &self.state.sessions.len())
            .field("persistent", &self.journal.is_some())
            .finish()
    }
}

impl LogStore {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::with_state(StoreState::default(), None, clock)
    }

    /// Opens the store persisted at `path`, creating it when absent.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let (journal, state) = Journal::open(path.as_ref())?;
        Ok(Self::with_state(state, Some(journal), clock))
    }

    fn with_state(state: StoreState, journal: Option<Journal>, clock: Arc<dyn Clock>) -> Self {
        let last_ts = state
            .background
            .iter()
            .map(|e| e.ts)
            .chain(state.sessions.iter().flat_map(|s| {
                std::iter::once(s.start_ts).chain(s.end_ts).chain(s.entries.iter().map(|e| e.ts))
            }))
            .max()
            .unwrap_or(i64::MIN);
        let recording = RecordingFlag::default();
        recording.set(state.sessions.iter().any(|s| s.state == SessionState::Active));
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        LogStore { state, journal, clock, recording, events, last_ts }
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn background(&self) -> &[LogEntry] {
        &self.state.background
    }

    pub fn sessions(&self) -> &[RecordingSession] {
        &self.state.sessions
    }

    pub fn session(&self, id: &SessionId) -> Option<&RecordingSession> {
        self.state.sessions.iter().find(|s| &s.id == id)
    }

    pub fn active_session(&self) -> Option<&RecordingSession> {
        self.state.sessions.iter().find(|s| s.state == SessionState::Active)
    }

    /// Resolves a full session id or a unique prefix of one.
    pub fn resolve_session(&self, id_or_prefix: &str) -> Result<SessionId, StoreError> {
        self.state.resolve_session(id_or_prefix)
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        Arc::clone(&self.clock)
    }

    pub fn recording_flag(&self) -> RecordingFlag {
        self.recording.clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StoreEvent> {
        self.events.subscribe()
    }

    fn now(&self) -> i64 {
        // Never step backwards, so every stream stays non-decreasing.
        self.clock.now().max(self.last_ts)
    }

    fn session_index(&self, id: &SessionId) -> Result<usize, StoreError> {
        self.state
            .sessions
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| StoreError::UnknownSession(id.to_string()))
    }

    /// Appends a query observed now, into the active recording if there is
    /// one, else into the background log.
    pub fn record(&mut self, qname: Fqdn, blocked: bool) -> Result<LogEntry, StoreError> {
        let entry = LogEntry { ts: self.now(), qname, blocked };
        let active = self.state.sessions.iter().position(|s| s.state == SessionState::Active);
        let sid = active.map(|i| self.state.sessions[i].id.clone());
        if let Some(j) = self.journal.as_mut() {
            j.append_entry(&entry, sid.as_ref())?;
        }
        match active {
            Some(i) => self.state.sessions[i].entries.push(entry.clone()),
            None => self.state.background.push(entry.clone()),
        }
        self.last_ts = entry.ts;
        let _ = self.events.send(StoreEvent::Entry(entry.clone()));
        Ok(entry)
    }

    /// Starts a recording and suspends user filters until it stops.
    pub fn start_recording(
        &mut self,
        app_bundle_id: &str,
        tags: BTreeSet<String>,
    ) -> Result<RecordingSession, StoreError> {
        if let Some(active) = self.active_session() {
            return Err(StoreError::RecordingAlreadyActive(active.id.clone()));
        }
        validate_bundle_id(app_bundle_id)?;
        for t in &tags {
            validate_tag(t)?;
        }
        let mut id = SessionId::generate();
        while self.session(&id).is_some() {
            id = SessionId::generate();
        }
        let session = RecordingSession {
            id,
            app_bundle_id: app_bundle_id.to_owned(),
            tags,
            start_ts: self.now(),
            end_ts: None,
            entries: Vec::new(),
            state: SessionState::Active,
        };
        if let Some(j) = self.journal.as_mut() {
            j.append_session(&session)?;
        }
        self.last_ts = session.start_ts;
        self.state.sessions.push(session.clone());
        self.recording.set(true);
        let _ = self.events.send(StoreEvent::RecordingStarted {
            id: session.id.clone(),
            app_bundle_id: session.app_bundle_id.clone(),
            start_ts: session.start_ts,
        });
        Ok(session)
    }

    pub fn stop_recording(&mut self, id: &SessionId) -> Result<RecordingSession, StoreError> {
        let i = self.session_index(id)?;
        if self.state.sessions[i].state != SessionState::Active {
            return Err(StoreError::NotActive(id.clone()));
        }
        let end_ts = self.now();
        let mut stopped = self.state.sessions[i].clone();
        stopped.end_ts = Some(end_ts);
        stopped.state = SessionState::Stopped;
        if let Some(j) = self.journal.as_mut() {
            j.append_session(&stopped)?;
        }
        self.state.sessions[i] = stopped.clone();
        self.last_ts = end_ts;
        self.recording.set(false);
        let _ = self.events.send(StoreEvent::RecordingStopped { id: id.clone(), end_ts });
        Ok(stopped)
    }

    /// Irreversibly deletes every entry of the session whose name is in
    /// `remove` (exact names only; parents and children are kept).
    pub fn sanitize(
        &mut self,
        id: &SessionId,
        remove: &BTreeSet<Fqdn>,
    ) -> Result<RecordingSession, StoreError> {
        let i = self.session_index(id)?;
        let state = self.state.sessions[i].state;
        if !matches!(state, SessionState::Stopped | SessionState::Sanitized) {
            return Err(StoreError::InvalidState { id: id.clone(), state });
        }
        let mut next = self.state.clone();
        let s = &mut next.sessions[i];
        s.entries.retain(|e| !remove.contains(&e.qname));
        s.state = SessionState::Sanitized;
        self.commit_rewrite(next)?;
        Ok(self.state.sessions[i].clone())
    }

    pub fn mark_uploaded(&mut self, id: &SessionId) -> Result<RecordingSession, StoreError> {
        let i = self.session_index(id)?;
        let state = self.state.sessions[i].state;
        if state == SessionState::Active {
            return Err(StoreError::InvalidState { id: id.clone(), state });
        }
        let mut updated = self.state.sessions[i].clone();
        updated.state = SessionState::Uploaded;
        if let Some(j) = self.journal.as_mut() {
            j.append_session(&updated)?;
        }
        self.state.sessions[i] = updated.clone();
        Ok(updated)
    }

    /// Removes a finished session and all its entries.
    pub fn delete_session(&mut self, id: &SessionId) -> Result<(), StoreError> {
        let i = self.session_index(id)?;
        let state = self.state.sessions[i].state;
        if state == SessionState::Active {
            return Err(StoreError::InvalidState { id: id.clone(), state });
        }
        let mut next = self.state.clone();
        next.sessions.remove(i);
        self.commit_rewrite(next)
    }

    /// Deletes background entries older than the policy allows. Recording
    /// sessions are left alone.
    pub fn purge_expired(&mut self, now: i64, policy: &RetentionPolicy) -> Result<usize, StoreError> {
        let Some(max_age) = policy.max_age() else {
            return Ok(0);
        };
        let cutoff = now.saturating_sub(i64::try_from(max_age).unwrap_or(i64::MAX));
        let expired = self.state.background.iter().filter(|e| e.ts < cutoff).count();
        if expired == 0 {
            return Ok(0);
        }
        let mut next = self.state.clone();
        next.background.retain(|e| e.ts >= cutoff);
        self.commit_rewrite(next)?;
        Ok(expired)
    }

    pub fn export_all(&self) -> String {
        render(&self.state)
    }

    /// Loads a dump into this (empty) store.
    pub fn import(&mut self, dump: &str) -> Result<(), StoreError> {
        if self.state.entry_count() > 0 || !self.state.sessions.is_empty() {
            return Err(StoreError::NotEmpty);
        }
        let state = parse_export(dump)?;
        let active = state.sessions.iter().any(|s| s.state == SessionState::Active);
        let restored = Self::with_state(state, None, Arc::clone(&self.clock));
        self.commit_rewrite(restored.state)?;
        self.last_ts = restored.last_ts;
        self.recording.set(active);
        Ok(())
    }

    pub fn compact(&mut self) -> Result<(), StoreError> {
        if let Some(j) = self.journal.as_mut() {
            j.compact(&self.state)?;
        }
        Ok(())
    }

    fn commit_rewrite(&mut self, next: StoreState) -> Result<(), StoreError> {
        if let Some(j) = self.journal.as_mut() {
            j.compact(&next)?;
        }
        self.state = next;
        Ok(())
    }
}
