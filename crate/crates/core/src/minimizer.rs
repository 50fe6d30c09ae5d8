//! Turns a finished recording into its shareable upload form.
//!
//! The upload keeps only the ISO calendar week in which the recording
//! started, the duration, and per-request offsets in whole seconds from the
//! recording start. Shifting a recording anywhere inside its start week
//! produces the same upload. Blocked flags are not shared.
//!
//! Upload document (UTF-8 JSON, canonical field order):
//!
//! ```text
//! {"v":1,"app":"com.example","week":"2020-W38","duration_s":69,"tags":["ios14"],"entries":[[0,"a.example.com"],...]}
//! ```

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fqdn::Fqdn;
use crate::logstore::{validate_bundle_id, validate_tag, RecordingSession, SessionState};

pub const DOC_VERSION: u32 = 1;
pub const WEEK_SECS: i64 = 604_800;
/// Offsets and durations must stay below two weeks.
pub const MAX_SPAN_SECS: u64 = 2 * WEEK_SECS as u64;

const DAY_SECS: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimizedEntry {
    pub offset_s: u64,
    pub qname: Fqdn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimizedRecording {
    pub app_bundle_id: String,
    /// Monday of the ISO week the recording started in.
    pub week_start: NaiveDate,
    pub duration_s: u64,
    pub tags: BTreeSet<String>,
    pub entries: Vec<MinimizedEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MinimizeError {
    #[error("session {0} is still active")]
    InvalidState(String),
    #[error("recording spans {0} s; uploads are limited to two weeks")]
    TooLong(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema violation: {0}")]
pub struct SchemaViolation(pub String);

fn violation(msg: impl Into<String>) -> SchemaViolation {
    SchemaViolation(msg.into())
}

/// Monday 00:00 UTC of the ISO week containing `ts`.
pub fn week_start_of(ts: i64) -> NaiveDate {
    let days = ts.div_euclid(DAY_SECS);
    // 1970-01-01 was a Thursday, three days after a Monday.
    let monday = days - (days + 3).rem_euclid(7);
    // 0001-01-01 is day 1 counted from the common era; 1970-01-01 is day 719163.
    i32::try_from(monday + 719_163)
        .ok()
        .and_then(NaiveDate::from_num_days_from_ce_opt)
        .expect("timestamp within calendar range")
}

pub fn minimize(session: &RecordingSession) -> Result<MinimizedRecording, MinimizeError> {
    let end_ts = match (session.state, session.end_ts) {
        (SessionState::Active, _) | (_, None) => {
            return Err(MinimizeError::InvalidState(session.id.to_string()))
        }
        (_, Some(end)) => end,
    };
    let duration = end_ts - session.start_ts;
    if duration < 0 || duration as u64 >= MAX_SPAN_SECS {
        return Err(MinimizeError::TooLong(duration));
    }
    let entries = session
        .entries
        .iter()
        .map(|e| MinimizedEntry { offset_s: (e.ts - session.start_ts) as u64, qname: e.qname.clone() })
        .collect();
    Ok(MinimizedRecording {
        app_bundle_id: session.app_bundle_id.clone(),
        week_start: week_start_of(session.start_ts),
        duration_s: duration as u64,
        tags: session.tags.clone(),
        entries,
    })
}

/// `YYYY-Www` for the ISO week starting on `monday`.
pub fn iso_week_label(monday: NaiveDate) -> String {
    let w = monday.iso_week();
    format!("{:04}-W{:02}", w.year(), w.week())
}

/// Accepts `YYYY-Www`, `YYYY-Www-D`, or `YYYY-MM-DD`; the day must be a Monday.
pub fn parse_week(s: &str) -> Result<NaiveDate, SchemaViolation> {
    let date = if let Some((year, rest)) = s.split_once("-W") {
        let (week, day) = match rest.split_once('-') {
            Some((w, d)) => (w, Some(d)),
            None => (rest, None),
        };
        let year: i32 = year.parse().map_err(|_| violation(format!("bad week {s:?}")))?;
        let week: u32 = week.parse().map_err(|_| violation(format!("bad week {s:?}")))?;
        let weekday = match day {
            None => Weekday::Mon,
            Some(d) => match d.parse::<u8>() {
                Ok(n @ 1..=7) => Weekday::try_from(n - 1).expect("1..=7 maps to a weekday"),
                _ => return Err(violation(format!("bad week day in {s:?}"))),
            },
        };
        NaiveDate::from_isoywd_opt(year, week, weekday)
            .ok_or_else(|| violation(format!("no such ISO week {s:?}")))?
    } else {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| violation(format!("bad week {s:?}")))?
    };
    if date.weekday() != Weekday::Mon {
        return Err(violation(format!("week start {date} is a {}, not a Monday", date.weekday())));
    }
    Ok(date)
}

impl MinimizedRecording {
    pub fn validate(&self) -> Result<(), SchemaViolation> {
        validate_bundle_id(&self.app_bundle_id).map_err(|e| violation(e.to_string()))?;
        for t in &self.tags {
            validate_tag(t).map_err(|e| violation(e.to_string()))?;
        }
        if self.week_start.weekday() != Weekday::Mon {
            return Err(violation(format!("week start {} is not a Monday", self.week_start)));
        }
        if self.duration_s >= MAX_SPAN_SECS {
            return Err(violation("duration_s exceeds two weeks"));
        }
        let mut prev = 0;
        for e in &self.entries {
            if e.offset_s > self.duration_s {
                return Err(violation(format!("offset {} beyond duration {}", e.offset_s, self.duration_s)));
            }
            if e.offset_s < prev {
                return Err(violation("entries not sorted by offset"));
            }
            prev = e.offset_s;
        }
        Ok(())
    }

    pub fn week_label(&self) -> String {
        iso_week_label(self.week_start)
    }

    pub fn request_count(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UploadDoc {
    v: u32,
    app: String,
    week: String,
    duration_s: u64,
    tags: Vec<String>,
    entries: Vec<(u64, Fqdn)>,
}

pub fn serialize(rec: &MinimizedRecording) -> Vec<u8> {
    let doc = UploadDoc {
        v: DOC_VERSION,
        app: rec.app_bundle_id.clone(),
        week: rec.week_label(),
        duration_s: rec.duration_s,
        tags: rec.tags.iter().cloned().collect(),
        entries: rec.entries.iter().map(|e| (e.offset_s, e.qname.clone())).collect(),
    };
    serde_json::to_vec(&doc).expect("upload document always serializes")
}

pub fn deserialize(bytes: &[u8]) -> Result<MinimizedRecording, SchemaViolation> {
    let doc: UploadDoc = serde_json::from_slice(bytes).map_err(|e| violation(e.to_string()))?;
    if doc.v != DOC_VERSION {
        return Err(violation(format!("unsupported version {}", doc.v)));
    }
    let rec = MinimizedRecording {
        app_bundle_id: doc.app,
        week_start: parse_week(&doc.week)?,
        duration_s: doc.duration_s,
        tags: doc.tags.into_iter().collect(),
        entries: doc
            .entries
            .into_iter()
            .map(|(offset_s, qname)| MinimizedEntry { offset_s, qname })
            .collect(),
    };
    rec.validate()?;
    Ok(rec)
}
