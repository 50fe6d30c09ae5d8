//! Time-windowed co-occurrence of domain requests.
//!
//! Given a target name X and a window of T seconds, every request for another
//! name Y participates when it lies within T seconds of its nearest X request
//! (exact same second when T = 0). Per Y, N counts participating requests and
//! the mean distance is averaged over them. Rows rank by ascending
//!
//! ```text
//! score = (mean_dt² + T/2 + 1) / N
//! ```
//!
//! so that both many co-occurring requests and close proximity pull a domain
//! up the list.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::fqdn::Fqdn;
use crate::logstore::LogEntry;

pub const MAX_WINDOW_S: u32 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoOccurrenceError {
    #[error("window {0} s outside 0..={MAX_WINDOW_S}")]
    InvalidWindow(u32),
    #[error("target {0} not present in the log")]
    TargetNotFound(Fqdn),
    #[error("score undefined for zero occurrences")]
    DomainError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoOccurrenceQuery {
    target: Fqdn,
    window_s: u32,
}

impl CoOccurrenceQuery {
    pub fn new(target: Fqdn, window_s: u32) -> Result<Self, CoOccurrenceError> {
        if window_s > MAX_WINDOW_S {
            return Err(CoOccurrenceError::InvalidWindow(window_s));
        }
        Ok(CoOccurrenceQuery { target, window_s })
    }

    pub fn target(&self) -> &Fqdn {
        &self.target
    }

    pub fn window_s(&self) -> u32 {
        self.window_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoOccurrenceRow {
    pub domain: Fqdn,
    pub n: usize,
    pub mean_dt_s: f64,
    pub score: f64,
}

pub fn score(mean_dt_s: f64, window_s: u32, n: usize) -> Result<f64, CoOccurrenceError> {
    if n == 0 {
        return Err(CoOccurrenceError::DomainError);
    }
    Ok((mean_dt_s * mean_dt_s + f64::from(window_s) / 2.0 + 1.0) / n as f64)
}

/// Ranks names by how closely their requests cluster around the target's.
///
/// The log does not need to be sorted.
pub fn find_cooccurrences<'a, I>(
    log: I,
    query: &CoOccurrenceQuery,
) -> Result<Vec<CoOccurrenceRow>, CoOccurrenceError>
where
    I: IntoIterator<Item = (i64, &'a Fqdn)>,
{
    let log: Vec<(i64, &Fqdn)> = log.into_iter().collect();
    let mut targets: Vec<i64> = log
        .iter()
        .filter(|(_, name)| **name == query.target)
        .map(|&(ts, _)| ts)
        .collect();
    if targets.is_empty() {
        return Err(CoOccurrenceError::TargetNotFound(query.target.clone()));
    }
    targets.sort_unstable();
    targets.dedup();

    let window = i64::from(query.window_s);
    // name -> (count, summed distance)
    let mut acc: HashMap<&Fqdn, (usize, u64)> = HashMap::new();
    for &(ts, name) in &log {
        if *name == query.target {
            continue;
        }
        let dt = nearest_distance(&targets, ts);
        if dt <= window {
            let slot = acc.entry(name).or_default();
            slot.0 += 1;
            slot.1 += dt as u64;
        }
    }

    let mut rows: Vec<CoOccurrenceRow> = acc
        .into_iter()
        .map(|(name, (n, sum))| {
            let mean_dt_s = sum as f64 / n as f64;
            CoOccurrenceRow {
                domain: name.clone(),
                n,
                mean_dt_s,
                score: score(mean_dt_s, query.window_s, n).expect("n >= 1"),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(b.n.cmp(&a.n))
            .then_with(|| a.domain.cmp(&b.domain))
    });
    Ok(rows)
}

/// Convenience wrapper over stored log entries.
pub fn find_in_log(log: &[LogEntry], query: &CoOccurrenceQuery) -> Result<Vec<CoOccurrenceRow>, CoOccurrenceError> {
    find_cooccurrences(log.iter().map(|e| (e.ts, &e.qname)), query)
}

/// Distance from `ts` to the closest element of the sorted, non-empty `xs`.
fn nearest_distance(xs: &[i64], ts: i64) -> i64 {
    let i = xs.partition_point(|&x| x < ts);
    let after = xs.get(i).map(|&x| x - ts);
    let before = i.checked_sub(1).map(|j| ts - xs[j]);
    match (before, after) {
        (Some(b), Some(a)) => b.min(a),
        (Some(d), None) | (None, Some(d)) => d,
        (None, None) => unreachable!("target timestamps are non-empty"),
    }
}
