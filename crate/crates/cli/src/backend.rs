//! Access to the local store, either directly or through a running monitor.
//!
//! A monitor holds an exclusive lock on the store. When the lock is free the
//! CLI takes it and edits the files itself; otherwise every operation goes
//! through the monitor's control API.

use std::collections::BTreeSet;
use std::fs::{File, TryLockError};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use appwatch_core::clock::SystemClock;
use appwatch_core::dns::{FilterRule, FilterSet};
use appwatch_core::logstore::{parse_export, LogStore, SessionId, StoreState};
use appwatch_core::monitor::{FilterListing, SanitizeRequest, SessionSummary, StartRequest};
use appwatch_core::Fqdn;
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::config::Home;

pub trait Backend {
    fn snapshot(&mut self) -> Result<StoreState>;
    fn start_recording(&mut self, app: &str, tags: BTreeSet<String>) -> Result<SessionSummary>;
    fn stop_recording(&mut self) -> Result<SessionSummary>;
    fn delete_session(&mut self, id: &SessionId) -> Result<()>;
    fn sanitize(&mut self, id: &SessionId, remove: BTreeSet<Fqdn>) -> Result<SessionSummary>;
    fn mark_uploaded(&mut self, id: &SessionId) -> Result<()>;
    fn export(&mut self) -> Result<String>;
    fn filters(&mut self) -> Result<FilterListing>;
    fn add_filter(&mut self, rule: FilterRule) -> Result<()>;
    fn remove_filter(&mut self, pattern: &Fqdn) -> Result<bool>;
}

/// Takes the store lock, creating the state directory as needed.
pub fn lock_store(home: &Home) -> Result<Option<File>> {
    home.ensure()?;
    let file = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(home.lock())
        .with_context(|| format!("opening {}", home.lock().display()))?;
    match file.try_lock() {
        Ok(()) => Ok(Some(file)),
        Err(TryLockError::WouldBlock) => Ok(None),
        Err(TryLockError::Error(e)) => Err(e).context("locking store"),
    }
}

pub fn open(home: &Home) -> Result<Box<dyn Backend>> {
    match lock_store(home)? {
        Some(lock) => Ok(Box::new(Local::open(home, lock)?)),
        None => {
            let addr = std::fs::read_to_string(home.monitor_addr())
                .ok()
                .and_then(|s| s.trim().parse::<SocketAddr>().ok())
                .ok_or_else(|| anyhow!("store is locked by another process"))?;
            Ok(Box::new(Remote::new(addr)))
        }
    }
}

pub struct Local {
    store: LogStore,
    filters_path: std::path::PathBuf,
    _lock: File,
}

impl Local {
    pub fn open(home: &Home, lock: File) -> Result<Self> {
        let store = LogStore::open(home.store(), Arc::new(SystemClock))
            .with_context(|| format!("opening {}", home.store().display()))?;
        Ok(Local { store, filters_path: home.filters(), _lock: lock })
    }

    fn load_filters(&self) -> Result<FilterSet> {
        FilterSet::load(&self.filters_path).with_context(|| format!("reading {}", self.filters_path.display()))
    }
}

impl Backend for Local {
    fn snapshot(&mut self) -> Result<StoreState> {
        Ok(self.store.state().clone())
    }

    fn start_recording(&mut self, app: &str, tags: BTreeSet<String>) -> Result<SessionSummary> {
        Ok((&self.store.start_recording(app, tags)?).into())
    }

    fn stop_recording(&mut self) -> Result<SessionSummary> {
        let id = self.store.active_session().map(|s| s.id.clone()).context("no recording is active")?;
        Ok((&self.store.stop_recording(&id)?).into())
    }

    fn delete_session(&mut self, id: &SessionId) -> Result<()> {
        Ok(self.store.delete_session(id)?)
    }

    fn sanitize(&mut self, id: &SessionId, remove: BTreeSet<Fqdn>) -> Result<SessionSummary> {
        Ok((&self.store.sanitize(id, &remove)?).into())
    }

    fn mark_uploaded(&mut self, id: &SessionId) -> Result<()> {
        self.store.mark_uploaded(id)?;
        Ok(())
    }

    fn export(&mut self) -> Result<String> {
        Ok(self.store.export_all())
    }

    fn filters(&mut self) -> Result<FilterListing> {
        Ok(FilterListing {
            suspended: self.store.recording_flag().is_active(),
            rules: self.load_filters()?.rules().collect(),
        })
    }

    fn add_filter(&mut self, rule: FilterRule) -> Result<()> {
        let mut set = self.load_filters()?;
        set.insert(rule);
        set.save(&self.filters_path).context("saving filters")
    }

    fn remove_filter(&mut self, pattern: &Fqdn) -> Result<bool> {
        let mut set = self.load_filters()?;
        let removed = set.remove(pattern);
        if removed {
            set.save(&self.filters_path).context("saving filters")?;
        }
        Ok(removed)
    }
}

pub struct Remote {
    base: String,
    agent: ureq::Agent,
}

impl Remote {
    pub fn new(addr: SocketAddr) -> Self {
        Remote { base: format!("http://{addr}/local/v1"), agent: http_agent() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

pub fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

/// Turns an error status into an error carrying the server's detail text.
pub fn check(mut resp: ureq::http::Response<ureq::Body>) -> Result<ureq::http::Response<ureq::Body>> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.body_mut().read_to_string().unwrap_or_default();
    let detail = serde_json::from_str::<Value>(&body)
        .ok()
        .and_then(|v| v.get("detail").and_then(Value::as_str).map(str::to_owned))
        .unwrap_or(body);
    bail!("{detail} (HTTP {})", status.as_u16())
}

fn json<T: DeserializeOwned>(resp: ureq::http::Response<ureq::Body>) -> Result<T> {
    Ok(check(resp)?.body_mut().read_json()?)
}

impl Backend for Remote {
    fn snapshot(&mut self) -> Result<StoreState> {
        let dump = self.export()?;
        Ok(parse_export(&dump)?)
    }

    fn start_recording(&mut self, app: &str, tags: BTreeSet<String>) -> Result<SessionSummary> {
        let req = StartRequest { app: app.to_owned(), tags };
        json(self.agent.post(self.url("/recording/start")).send_json(&req)?)
    }

    fn stop_recording(&mut self) -> Result<SessionSummary> {
        json(self.agent.post(self.url("/recording/stop")).send_empty()?)
    }

    fn delete_session(&mut self, id: &SessionId) -> Result<()> {
        check(self.agent.delete(self.url(&format!("/sessions/{id}"))).call()?)?;
        Ok(())
    }

    fn sanitize(&mut self, id: &SessionId, remove: BTreeSet<Fqdn>) -> Result<SessionSummary> {
        let req = SanitizeRequest { remove };
        json(self.agent.post(self.url(&format!("/sessions/{id}/sanitize"))).send_json(&req)?)
    }

    fn mark_uploaded(&mut self, id: &SessionId) -> Result<()> {
        check(self.agent.post(self.url(&format!("/sessions/{id}/uploaded"))).send_empty()?)?;
        Ok(())
    }

    fn export(&mut self) -> Result<String> {
        let mut resp = check(self.agent.get(self.url("/export")).call()?)?;
        Ok(resp.body_mut().with_config().limit(u64::MAX).read_to_string()?)
    }

    fn filters(&mut self) -> Result<FilterListing> {
        json(self.agent.get(self.url("/filters")).call()?)
    }

    fn add_filter(&mut self, rule: FilterRule) -> Result<()> {
        check(self.agent.post(self.url("/filters")).send_json(&rule)?)?;
        Ok(())
    }

    fn remove_filter(&mut self, pattern: &Fqdn) -> Result<bool> {
        let resp = self.agent.delete(self.url("/filters")).query("pattern", pattern.as_str()).call()?;
        if resp.status() == 404 {
            return Ok(false);
        }
        check(resp)?;
        Ok(true)
    }
}
