use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use appwatch_core::dns::ProxyConfig;
use appwatch_core::monitor::DEFAULT_CONTROL;
use serde::Deserialize;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";
pub const DEFAULT_SERVE_LISTEN: &str = "127.0.0.1:8080";

/// Values read from the configuration file; flags take precedence.
#[derive(Debug, Default, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub listen: Option<SocketAddr>,
    pub upstream: Option<SocketAddr>,
    pub timeout_s: Option<u64>,
    pub retention_s: Option<u64>,
    pub control: Option<SocketAddr>,
    pub server: Option<String>,
    pub serve_listen: Option<SocketAddr>,
    pub data_dir: Option<PathBuf>,
}

impl Config {
    /// Reads `path`; a missing file is only an error when it was named explicitly.
    pub fn load(path: &Path, explicit: bool) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && !explicit => return Ok(Config::default()),
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn proxy(&self, listen: Option<SocketAddr>, upstream: Option<SocketAddr>, timeout_s: Option<u64>) -> ProxyConfig {
        let d = ProxyConfig::default();
        ProxyConfig {
            listen: listen.or(self.listen).unwrap_or(d.listen),
            upstream: upstream.or(self.upstream).unwrap_or(d.upstream),
            timeout: timeout_s.or(self.timeout_s).map(Duration::from_secs).unwrap_or(d.timeout),
        }
    }

    pub fn control(&self, flag: Option<SocketAddr>) -> SocketAddr {
        flag.or(self.control).unwrap_or(DEFAULT_CONTROL)
    }

    pub fn server(&self, flag: Option<String>) -> String {
        flag.or_else(|| self.server.clone()).unwrap_or_else(|| DEFAULT_SERVER.to_owned())
    }
}

/// On-disk layout of the state directory.
#[derive(Debug, Clone)]
pub struct Home {
    pub dir: PathBuf,
}

impl Home {
    pub fn resolve(flag: Option<PathBuf>) -> Result<Self> {
        let dir = match flag {
            Some(d) => d,
            None => match std::env::var_os("APPWATCH_HOME") {
                Some(d) => PathBuf::from(d),
                None => {
                    let home = std::env::var_os("HOME").context("HOME is not set; pass --home")?;
                    PathBuf::from(home).join(".appwatch")
                }
            },
        };
        Ok(Home { dir })
    }

    pub fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn store(&self) -> PathBuf {
        self.dir.join("store.jsonl")
    }

    pub fn lock(&self) -> PathBuf {
        self.dir.join("store.lock")
    }

    /// Written by a running monitor with its control address.
    pub fn monitor_addr(&self) -> PathBuf {
        self.dir.join("monitor.addr")
    }

    pub fn filters(&self) -> PathBuf {
        self.dir.join("filters.json")
    }

    pub fn server_data(&self) -> PathBuf {
        self.dir.join("server")
    }
}
