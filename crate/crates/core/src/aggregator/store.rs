use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::analysis::{
    candidate_names, cohort_deltas, comparison_table, detect_tracker_candidates, domain_listing, prune_unique_domains,
    report_from_view, summarize, AppReport, DomainRow, Metric, MetricDelta, MetricSummary, TrackerCandidate,
};
use super::AggError;
use crate::cooccurrence::{find_cooccurrences, CoOccurrenceQuery, CoOccurrenceRow};
use crate::fqdn::Fqdn;
use crate::minimizer::{self, MinimizedRecording};
use crate::trackerdb::TrackerDb;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMembers {
    Apps(BTreeSet<String>),
    /// Every app with recordings carrying the tag; only those recordings count.
    Tag(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    pub name: String,
    pub members: GroupMembers,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: Group,
    pub apps: Vec<AppReport>,
    /// Listed members without any matching recording.
    pub missing: Vec<String>,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppDetail {
    pub report: AppReport,
    /// True for low-confidence apps, whose names are never listed.
    pub domains_suppressed: bool,
    pub domains: Vec<DomainRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortDiff {
    pub app_bundle_id: String,
    pub tag_a: String,
    pub tag_b: String,
    pub report_a: AppReport,
    pub report_b: AppReport,
    pub metrics: Vec<MetricDelta>,
}

struct StoredRecording {
    id: String,
    rec: MinimizedRecording,
}

struct Analysis {
    report: AppReport,
    domains: Vec<DomainRow>,
    candidate_names: BTreeSet<Fqdn>,
}

#[derive(Default)]
struct AppSlot {
    recordings: Vec<StoredRecording>,
    analysis: OnceLock<Arc<Analysis>>,
}

impl AppSlot {
    fn refs(&self) -> Vec<&MinimizedRecording> {
        self.recordings.iter().map(|r| &r.rec).collect()
    }

    fn tagged(&self, tag: &str) -> Vec<&MinimizedRecording> {
        self.recordings.iter().map(|r| &r.rec).filter(|r| r.tags.contains(tag)).collect()
    }
}

#[derive(Default)]
struct State {
    apps: BTreeMap<String, AppSlot>,
    recording_app: HashMap<String, String>,
    groups: BTreeMap<String, Group>,
}

/// Recording store plus cached per-app analysis.
pub struct Aggregator {
    data_dir: Option<PathBuf>,
    trackers: Arc<TrackerDb>,
    state: RwLock<State>,
}

fn analyze(app_id: &str, slot: &AppSlot, db: &TrackerDb) -> Analysis {
    let refs = slot.refs();
    let view = prune_unique_domains(&refs);
    Analysis {
        report: report_from_view(app_id, &view, db),
        domains: domain_listing(&view, db),
        candidate_names: candidate_names(&refs),
    }
}

fn report_for(app_id: &str, recordings: &[&MinimizedRecording], db: &TrackerDb) -> AppReport {
    report_from_view(app_id, &prune_unique_domains(recordings), db)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, AggError> {
    fs::create_dir_all(dir)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    Ok(paths)
}

fn corrupt(path: &Path, reason: impl ToString) -> AggError {
    AggError::Corrupt { path: path.to_owned(), reason: reason.to_string() }
}

impl Aggregator {
    pub fn in_memory(trackers: TrackerDb) -> Self {
        Aggregator { data_dir: None, trackers: Arc::new(trackers), state: RwLock::new(State::default()) }
    }

    /// Loads every stored recording and group under `data_dir`.
    pub fn open(data_dir: impl Into<PathBuf>, trackers: TrackerDb) -> Result<Self, AggError> {
        let data_dir = data_dir.into();
        let mut state = State::default();
        for path in json_files(&data_dir.join("recordings"))? {
            let bytes = fs::read(&path)?;
            let rec = minimizer::deserialize(&bytes).map_err(|e| corrupt(&path, e))?;
            let id = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| corrupt(&path, "bad file name"))?;
            state.recording_app.insert(id.to_owned(), rec.app_bundle_id.clone());
            state
                .apps
                .entry(rec.app_bundle_id.clone())
                .or_default()
                .recordings
                .push(StoredRecording { id: id.to_owned(), rec });
        }
        for path in json_files(&data_dir.join("groups"))? {
            let bytes = fs::read(&path)?;
            let group: Group = serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, e))?;
            state.groups.insert(group.id.clone(), group);
        }
        Ok(Aggregator { data_dir: Some(data_dir), trackers: Arc::new(trackers), state: RwLock::new(state) })
    }

    pub fn trackers(&self) -> &TrackerDb {
        &self.trackers
    }

    fn read(&self) -> RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn ingest(&self, doc: &[u8]) -> Result<String, AggError> {
        self.ingest_recording(minimizer::deserialize(doc)?)
    }

    pub fn ingest_recording(&self, rec: MinimizedRecording) -> Result<String, AggError> {
        rec.validate()?;
        let id = Uuid::now_v7().to_string();
        let mut state = self.state.write().unwrap_or_else(|e| e.into_inner());
        if let Some(dir) = &self.data_dir {
            write_atomic(&dir.join("recordings").join(format!("{id}.json")), &minimizer::serialize(&rec))?;
        }
        state.recording_app.insert(id.clone(), rec.app_bundle_id.clone());
        let slot = state.apps.entry(rec.app_bundle_id.clone()).or_default();
        slot.recordings.push(StoredRecording { id: id.clone(), rec });
        slot.analysis = OnceLock::new();
        Ok(id)
    }

    pub fn app_ids(&self) -> Vec<String> {
        self.read().apps.keys().cloned().collect()
    }

    pub fn recording_count(&self) -> usize {
        self.read().recording_app.len()
    }

    pub fn recording(&self, id: &str) -> Option<MinimizedRecording> {
        let state = self.read();
        let app = state.recording_app.get(id)?;
        state.apps[app].recordings.iter().find(|r| r.id == id).map(|r| r.rec.clone())
    }

    /// Ids of an app's recordings in upload order.
    pub fn recording_ids(&self, app_id: &str) -> Result<Vec<String>, AggError> {
        let state = self.read();
        let slot = state.apps.get(app_id).ok_or_else(|| AggError::UnknownApp(app_id.to_owned()))?;
        Ok(slot.recordings.iter().map(|r| r.id.clone()).collect())
    }

    fn analysis(&self, state: &State, app_id: &str) -> Result<Arc<Analysis>, AggError> {
        let slot = state.apps.get(app_id).ok_or_else(|| AggError::UnknownApp(app_id.to_owned()))?;
        Ok(slot.analysis.get_or_init(|| Arc::new(analyze(app_id, slot, &self.trackers))).clone())
    }

    pub fn app_report(&self, app_id: &str) -> Result<AppReport, AggError> {
        Ok(self.analysis(&self.read(), app_id)?.report.clone())
    }

    pub fn app_detail(&self, app_id: &str) -> Result<AppDetail, AggError> {
        let a = self.analysis(&self.read(), app_id)?;
        let suppressed = a.report.low_confidence;
        Ok(AppDetail {
            report: a.report.clone(),
            domains_suppressed: suppressed,
            domains: if suppressed { Vec::new() } else { a.domains.clone() },
        })
    }

    /// Reports for `ids` (all apps when `None`), sorted by `key` or by bundle id.
    pub fn comparison_table(
        &self,
        ids: Option<&[String]>,
        key: Option<Metric>,
        descending: bool,
    ) -> Result<Vec<AppReport>, AggError> {
        let state = self.read();
        let ids: Vec<String> = match ids {
            Some(ids) => ids.to_vec(),
            None => state.apps.keys().cloned().collect(),
        };
        let reports = ids
            .iter()
            .map(|id| Ok(self.analysis(&state, id)?.report.clone()))
            .collect::<Result<Vec<_>, AggError>>()?;
        Ok(match key {
            Some(key) => comparison_table(reports, key, descending),
            None => {
                let mut reports = reports;
                reports.sort_by(|a, b| a.app_bundle_id.cmp(&b.app_bundle_id));
                if descending {
                    reports.reverse();
                }
                reports
            }
        })
    }

    pub fn create_group(&self, name: &str, members: GroupMembers) -> Result<Group, AggError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(AggError::InvalidParam("group name must not be empty".into()));
        }
        match &members {
            GroupMembers::Apps(apps) if apps.is_empty() => return Err(AggError::EmptyGroup),
            GroupMembers::Tag(tag) if tag.is_empty() => {
                return Err(AggError::InvalidParam("tag must not be empty".into()))
            }
            _ => {}
        }
        let group = Group { id: Uuid::now_v7().to_string(), name: name.to_owned(), members };
        let mut state = self.state.write().unwrap_or_else(|e| e.into_inner());
        if let Some(dir) = &self.data_dir {
            let bytes = serde_json::to_vec(&group).expect("group serializes");
            write_atomic(&dir.join("groups").join(format!("{}.json", group.id)), &bytes)?;
        }
        state.groups.insert(group.id.clone(), group.clone());
        Ok(group)
    }

    pub fn group(&self, id: &str) -> Result<Group, AggError> {
        self.read().groups.get(id).cloned().ok_or_else(|| AggError::UnknownGroup(id.to_owned()))
    }

    pub fn group_report(&self, id: &str) -> Result<GroupReport, AggError> {
        let group = self.group(id)?;
        let state = self.read();
        let mut apps = Vec::new();
        let mut missing = Vec::new();
        match &group.members {
            GroupMembers::Apps(ids) => {
                for app in ids {
                    match self.analysis(&state, app) {
                        Ok(a) => apps.push(a.report.clone()),
                        Err(AggError::UnknownApp(_)) => missing.push(app.clone()),
                        Err(e) => return Err(e),
                    }
                }
            }
            GroupMembers::Tag(tag) => {
                for (app, slot) in &state.apps {
                    let recs = slot.tagged(tag);
                    if !recs.is_empty() {
                        apps.push(report_for(app, &recs, &self.trackers));
                    }
                }
            }
        }
        let metrics = summarize(&apps)?;
        Ok(GroupReport { group, apps, missing, metrics })
    }

    pub fn compare_cohorts(&self, app_id: &str, tag_a: &str, tag_b: &str) -> Result<CohortDiff, AggError> {
        let state = self.read();
        let slot = state.apps.get(app_id).ok_or_else(|| AggError::UnknownApp(app_id.to_owned()))?;
        let cohort = |tag: &str| {
            let recs = slot.tagged(tag);
            if recs.is_empty() {
                Err(AggError::MissingCohort(tag.to_owned()))
            } else {
                Ok(report_for(app_id, &recs, &self.trackers))
            }
        };
        let report_a = cohort(tag_a)?;
        let report_b = cohort(tag_b)?;
        Ok(CohortDiff {
            app_bundle_id: app_id.to_owned(),
            tag_a: tag_a.to_owned(),
            tag_b: tag_b.to_owned(),
            metrics: cohort_deltas(&report_a, &report_b),
            report_a,
            report_b,
        })
    }

    pub fn tracker_candidates(&self, min_apps: usize) -> Result<Vec<TrackerCandidate>, AggError> {
        let state = self.read();
        let analyses = state
            .apps
            .keys()
            .map(|id| self.analysis(&state, id))
            .collect::<Result<Vec<_>, _>>()?;
        detect_tracker_candidates(analyses.iter().map(|a| &a.candidate_names), min_apps, &self.trackers)
    }

    /// Co-occurrence over one uploaded recording, using offsets as timestamps.
    pub fn cooccurrence(&self, recording_id: &str, query: &CoOccurrenceQuery) -> Result<Vec<CoOccurrenceRow>, AggError> {
        let rec = self.recording(recording_id).ok_or_else(|| AggError::UnknownRecording(recording_id.to_owned()))?;
        Ok(find_cooccurrences(rec.entries.iter().map(|e| (e.offset_s as i64, &e.qname)), query)?)
    }
}
