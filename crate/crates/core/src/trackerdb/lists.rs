//! Tracker list parsers.
//!
//! Two input conventions are understood: hosts files (`0.0.0.0 host`) and
//! the domain-anchored subset of adblock filter lists (`||host^`). Parsing
//! never fails; lines that do not fit are counted and skipped.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::fqdn::Fqdn;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ListEntry {
    pub pattern: Fqdn,
    pub include_subdomains: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackerList {
    pub source_name: String,
    pub entries: BTreeSet<ListEntry>,
}

impl TrackerList {
    pub fn new(source_name: impl Into<String>) -> Self {
        TrackerList { source_name: source_name.into(), entries: BTreeSet::new() }
    }

    pub fn with_entries<I>(source_name: impl Into<String>, entries: I) -> Self
    where
        I: IntoIterator<Item = (Fqdn, bool)>,
    {
        TrackerList {
            source_name: source_name.into(),
            entries: entries
                .into_iter()
                .map(|(pattern, include_subdomains)| ListEntry { pattern, include_subdomains })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedList {
    pub list: TrackerList,
    /// Lines that were neither blank, comments, nor usable rules.
    pub skipped: usize,
}

const SINK_ADDRS: &[&str] = &["0.0.0.0", "127.0.0.1"];

// Loopback aliases that hosts files declare for themselves.
const LOCAL_NAMES: &[&str] = &[
    "localhost",
    "localhost.localdomain",
    "local",
    "broadcasthost",
    "ip6-localhost",
    "ip6-loopback",
    "0.0.0.0",
];

pub fn parse_hosts_list(source_name: &str, text: &str) -> ParsedList {
    let mut list = TrackerList::new(source_name);
    let mut skipped = 0;
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let addr = fields.next().unwrap_or("");
        let hosts: Vec<&str> = fields.collect();
        if !SINK_ADDRS.contains(&addr) || hosts.is_empty() {
            skipped += 1;
            continue;
        }
        let mut usable = false;
        for host in hosts {
            if LOCAL_NAMES.contains(&host) {
                usable = true;
                continue;
            }
            if let Ok(pattern) = Fqdn::new(host) {
                list.entries.insert(ListEntry { pattern, include_subdomains: false });
                usable = true;
            }
        }
        if !usable {
            skipped += 1;
        }
    }
    ParsedList { list, skipped }
}

pub fn parse_domain_list(source_name: &str, text: &str) -> ParsedList {
    let mut list = TrackerList::new(source_name);
    let mut skipped = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('!') || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let pattern = line
            .strip_prefix("||")
            .and_then(|rest| rest.strip_suffix('^'))
            .and_then(|host| Fqdn::new(host).ok());
        match pattern {
            Some(pattern) => {
                list.entries.insert(ListEntry { pattern, include_subdomains: true });
            }
            None => skipped += 1,
        }
    }
    ParsedList { list, skipped }
}
