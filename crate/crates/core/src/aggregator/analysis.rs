use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::AggError;
use crate::fqdn::Fqdn;
use crate::minimizer::{MinimizedEntry, MinimizedRecording};
use crate::trackerdb::{registrable_domain, Classification, TrackerDb};

/// Entries of one recording that survive unique-domain pruning.
#[derive(Debug, Clone)]
pub struct PrunedRecording<'a> {
    pub duration_s: u64,
    pub entries: Vec<&'a MinimizedEntry>,
}

#[derive(Debug, Clone)]
pub struct PrunedView<'a> {
    pub recordings: Vec<PrunedRecording<'a>>,
    pub kept: BTreeSet<Fqdn>,
    pub removed: BTreeSet<Fqdn>,
}

impl PrunedView<'_> {
    pub fn request_count(&self) -> usize {
        self.recordings.iter().map(|r| r.entries.len()).sum()
    }
}

/// Drops every name that occurs in only one of the app's recordings.
pub fn prune_unique_domains<'a>(recordings: &[&'a MinimizedRecording]) -> PrunedView<'a> {
    let mut presence: HashMap<&Fqdn, usize> = HashMap::new();
    for rec in recordings {
        let distinct: BTreeSet<&Fqdn> = rec.entries.iter().map(|e| &e.qname).collect();
        for name in distinct {
            *presence.entry(name).or_default() += 1;
        }
    }
    let mut kept = BTreeSet::new();
    let mut removed = BTreeSet::new();
    for (name, count) in presence {
        if count >= 2 {
            kept.insert(name.clone());
        } else {
            removed.insert(name.clone());
        }
    }
    let recordings = recordings
        .iter()
        .map(|rec| PrunedRecording {
            duration_s: rec.duration_s,
            entries: rec.entries.iter().filter(|e| kept.contains(&e.qname)).collect(),
        })
        .collect();
    PrunedView { recordings, kept, removed }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppReport {
    pub app_bundle_id: String,
    pub recording_count: usize,
    pub total_requests: usize,
    pub avg_req_per_min: f64,
    pub unique_domains: usize,
    pub unique_subdomains: usize,
    pub tracker_domain_share: f64,
    pub tracker_request_share: f64,
    /// Set when fewer than two recordings exist, so nothing can be cross-checked.
    pub low_confidence: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn report_from_view(app_bundle_id: &str, view: &PrunedView<'_>, db: &TrackerDb) -> AppReport {
    let tracker_names: BTreeSet<&Fqdn> = view.kept.iter().filter(|n| db.is_tracker(n)).collect();
    let domains: BTreeSet<Fqdn> = view.kept.iter().map(registrable_domain).collect();
    let tracker_domains: BTreeSet<Fqdn> = tracker_names.iter().map(|n| registrable_domain(n)).collect();

    let total_requests = view.request_count();
    let tracker_requests = view
        .recordings
        .iter()
        .flat_map(|r| &r.entries)
        .filter(|e| tracker_names.contains(&e.qname))
        .count();

    let rates: Vec<f64> = view
        .recordings
        .iter()
        .filter(|r| r.duration_s > 0)
        .map(|r| r.entries.len() as f64 * 60.0 / r.duration_s as f64)
        .collect();
    let avg_req_per_min = if rates.is_empty() { 0.0 } else { rates.iter().sum::<f64>() / rates.len() as f64 };

    AppReport {
        app_bundle_id: app_bundle_id.to_owned(),
        recording_count: view.recordings.len(),
        total_requests,
        avg_req_per_min,
        unique_domains: domains.len(),
        unique_subdomains: view.kept.len(),
        tracker_domain_share: ratio(tracker_domains.len(), domains.len()),
        tracker_request_share: ratio(tracker_requests, total_requests),
        low_confidence: view.recordings.len() < 2,
    }
}

pub fn app_report(app_bundle_id: &str, recordings: &[&MinimizedRecording], db: &TrackerDb) -> AppReport {
    report_from_view(app_bundle_id, &prune_unique_domains(recordings), db)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainRow {
    pub fqdn: Fqdn,
    pub registrable_domain: Fqdn,
    pub requests: usize,
    pub classification: Classification,
}

pub fn domain_listing(view: &PrunedView<'_>, db: &TrackerDb) -> Vec<DomainRow> {
    let mut counts: BTreeMap<&Fqdn, usize> = BTreeMap::new();
    for e in view.recordings.iter().flat_map(|r| &r.entries) {
        *counts.entry(&e.qname).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(name, requests)| DomainRow {
            fqdn: name.clone(),
            registrable_domain: registrable_domain(name),
            requests,
            classification: db.classify(name),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RecordingCount,
    TotalRequests,
    AvgReqPerMin,
    UniqueDomains,
    UniqueSubdomains,
    TrackerDomainShare,
    TrackerRequestShare,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::RecordingCount,
        Metric::TotalRequests,
        Metric::AvgReqPerMin,
        Metric::UniqueDomains,
        Metric::UniqueSubdomains,
        Metric::TrackerDomainShare,
        Metric::TrackerRequestShare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RecordingCount => "recording_count",
            Metric::TotalRequests => "total_requests",
            Metric::AvgReqPerMin => "avg_req_per_min",
            Metric::UniqueDomains => "unique_domains",
            Metric::UniqueSubdomains => "unique_subdomains",
            Metric::TrackerDomainShare => "tracker_domain_share",
            Metric::TrackerRequestShare => "tracker_request_share",
        }
    }

    pub fn parse(s: &str) -> Result<Self, AggError> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AggError::UnknownSortKey(s.to_owned()))
    }

    pub fn value(self, r: &AppReport) -> f64 {
        match self {
            Metric::RecordingCount => r.recording_count as f64,
            Metric::TotalRequests => r.total_requests as f64,
            Metric::AvgReqPerMin => r.avg_req_per_min,
            Metric::UniqueDomains => r.unique_domains as f64,
            Metric::UniqueSubdomains => r.unique_subdomains as f64,
            Metric::TrackerDomainShare => r.tracker_domain_share,
            Metric::TrackerRequestShare => r.tracker_request_share,
        }
    }
}

/// Sorts by `key`; equal keys fall back to ascending bundle id.
pub fn comparison_table(mut reports: Vec<AppReport>, key: Metric, descending: bool) -> Vec<AppReport> {
    reports.sort_by(|a, b| {
        let ord = key.value(a).total_cmp(&key.value(b));
        let ord = if descending { ord.reverse() } else { ord };
        ord.then_with(|| a.app_bundle_id.cmp(&b.app_bundle_id))
    });
    reports
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

/// Element-wise min, unweighted mean over apps, and max.
pub fn summarize(reports: &[AppReport]) -> Result<Vec<MetricSummary>, AggError> {
    if reports.is_empty() {
        return Err(AggError::EmptyGroup);
    }
    Ok(Metric::ALL
        .into_iter()
        .map(|metric| {
            let values: Vec<f64> = reports.iter().map(|r| metric.value(r)).collect();
            MetricSummary {
                metric,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                avg: values.iter().sum::<f64>() / values.len() as f64,
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: Metric,
    pub value_a: f64,
    pub value_b: f64,
    pub delta: f64,
}

pub fn cohort_deltas(a: &AppReport, b: &AppReport) -> Vec<MetricDelta> {
    Metric::ALL
        .into_iter()
        .map(|metric| {
            let (value_a, value_b) = (metric.value(a), metric.value(b));
            MetricDelta { metric, value_a, value_b, delta: value_b - value_a }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrackerCandidate {
    pub fqdn: Fqdn,
    pub app_count: usize,
    pub already_listed: bool,
}

/// Names an app contributes to candidate detection: the pruned set, or every
/// name when only one recording exists.
pub fn candidate_names(recordings: &[&MinimizedRecording]) -> BTreeSet<Fqdn> {
    if recordings.len() == 1 {
        recordings[0].entries.iter().map(|e| e.qname.clone()).collect()
    } else {
        prune_unique_domains(recordings).kept
    }
}

pub fn detect_tracker_candidates<'a, I>(
    per_app_names: I,
    min_apps: usize,
    db: &TrackerDb,
) -> Result<Vec<TrackerCandidate>, AggError>
where
    I: IntoIterator<Item = &'a BTreeSet<Fqdn>>,
{
    if min_apps < 2 {
        return Err(AggError::InvalidParam(format!("min_apps must be at least 2, got {min_apps}")));
    }
    let mut app_counts: HashMap<&Fqdn, usize> = HashMap::new();
    for names in per_app_names {
        for name in names {
            *app_counts.entry(name).or_default() += 1;
        }
    }
    let mut out: Vec<TrackerCandidate> = app_counts
        .into_iter()
        .filter(|&(name, count)| count >= min_apps && !db.is_tracker(name))
        .map(|(name, app_count)| TrackerCandidate { fqdn: name.clone(), app_count, already_listed: false })
        .collect();
    out.sort_by(|a, b| b.app_count.cmp(&a.app_count).then_with(|| a.fqdn.cmp(&b.fqdn)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trackerdb::TrackerList;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn fq(s: &str) -> Fqdn {
        Fqdn::new(s).unwrap()
    }

    fn rec(duration_s: u64, names: &[&str]) -> MinimizedRecording {
        MinimizedRecording {
            app_bundle_id: "com.example".into(),
            week_start: NaiveDate::from_ymd_opt(2020, 9, 14).unwrap(),
            duration_s,
            tags: BTreeSet::new(),
            entries: names.iter().map(|n| MinimizedEntry { offset_s: 0, qname: fq(n) }).collect(),
        }
    }

    fn report(id: &str, share: f64, domains: usize) -> AppReport {
        AppReport {
            app_bundle_id: id.into(),
            recording_count: 2,
            total_requests: 10,
            avg_req_per_min: 1.0,
            unique_domains: domains,
            unique_subdomains: domains,
            tracker_domain_share: 0.0,
            tracker_request_share: share,
            low_confidence: false,
        }
    }

    #[test]
    fn pruning_examples() {
        let r1 = rec(60, &["d1.com"]);
        let r2 = rec(60, &["d1.com"]);
        let r3 = rec(60, &["d2.com", "d2.com", "d2.com"]);
        let view = prune_unique_domains(&[&r1, &r2, &r3]);
        assert_eq!(view.kept, [fq("d1.com")].into());
        assert_eq!(view.removed, [fq("d2.com")].into());
        assert_eq!(view.request_count(), 2);
    }

    #[test]
    fn single_recording_keeps_nothing() {
        let r = rec(60, &["a.com", "b.com"]);
        let report = app_report("com.example", &[&r], &TrackerDb::new());
        assert_eq!(report.recording_count, 1);
        assert_eq!(report.total_requests, 0);
        assert!(report.low_confidence);
        assert_eq!(candidate_names(&[&r]), [fq("a.com"), fq("b.com")].into());
    }

    #[test]
    fn request_rate_is_unweighted_mean() {
        let a = rec(120, &["x.com"; 30]);
        let b = rec(60, &["x.com"; 20]);
        let z = rec(0, &["x.com"]);
        let r = app_report("com.example", &[&a, &b, &z], &TrackerDb::new());
        assert_eq!(r.avg_req_per_min, 17.5);
        assert_eq!(r.total_requests, 51);
    }

    #[test]
    fn tracker_shares() {
        let db = TrackerDb::from_lists([TrackerList::with_entries("t", [(fq("adjust.com"), true)])]);
        let names = ["app.adjust.com", "app.adjust.com", "api.example.com", "cdn.example.com"];
        let a = rec(60, &names);
        let b = rec(60, &names);
        let r = app_report("x", &[&a, &b], &db);
        assert_eq!((r.unique_domains, r.unique_subdomains), (2, 3));
        assert_eq!(r.tracker_domain_share, 0.5);
        assert_eq!(r.tracker_request_share, 0.5);
    }

    #[test]
    fn table_sorting() {
        let reports = vec![report("a", 0.1, 1), report("b", 0.5, 1), report("c", 0.3, 1)];
        let sorted = comparison_table(reports, Metric::TrackerRequestShare, true);
        let order: Vec<f64> = sorted.iter().map(|r| r.tracker_request_share).collect();
        assert_eq!(order, [0.5, 0.3, 0.1]);

        let tied = vec![report("z", 0.2, 1), report("m", 0.2, 1), report("a", 0.2, 1)];
        let ids: Vec<String> = comparison_table(tied, Metric::TrackerRequestShare, true)
            .into_iter()
            .map(|r| r.app_bundle_id)
            .collect();
        assert_eq!(ids, ["a", "m", "z"]);
    }

    #[test]
    fn unknown_sort_key() {
        assert!(matches!(Metric::parse("popularity"), Err(AggError::UnknownSortKey(_))));
        for m in Metric::ALL {
            assert_eq!(Metric::parse(m.as_str()).unwrap(), m);
        }
    }

    #[test]
    fn group_summary() {
        let rs: Vec<AppReport> = [3.0, 32.0, 75.0]
            .into_iter()
            .enumerate()
            .map(|(i, rate)| AppReport { avg_req_per_min: rate, ..report(&i.to_string(), 0.0, 1) })
            .collect();
        let s = summarize(&rs).unwrap();
        let rate = s.iter().find(|m| m.metric == Metric::AvgReqPerMin).unwrap();
        assert_eq!((rate.min, rate.max), (3.0, 75.0));
        assert!((rate.avg - 110.0 / 3.0).abs() < 1e-12);
        assert!(matches!(summarize(&[]), Err(AggError::EmptyGroup)));

        let single = summarize(&rs[..1]).unwrap();
        assert!(single.iter().all(|m| m.min == m.avg && m.avg == m.max));
    }

    #[test]
    fn candidates() {
        let db = TrackerDb::from_lists([TrackerList::with_entries("t", [(fq("known.com"), true)])]);
        let mut apps = Vec::new();
        for i in 0..10 {
            let mut set: BTreeSet<Fqdn> = [fq("known.com"), fq("wide.example")].into();
            if i < 4 {
                set.insert(fq("four.example"));
            }
            apps.push(set);
        }
        let out = detect_tracker_candidates(&apps, 5, &db).unwrap();
        assert_eq!(out, vec![TrackerCandidate { fqdn: fq("wide.example"), app_count: 10, already_listed: false }]);
        assert!(detect_tracker_candidates(&apps, 1, &db).is_err());
    }

    fn arb_recordings() -> impl Strategy<Value = Vec<MinimizedRecording>> {
        let names: Vec<String> = (0..8).map(|i| format!("n{i}.example")).collect();
        prop::collection::vec(
            (0u64..600, prop::collection::vec(prop::sample::select(names), 0..20)),
            1..6,
        )
        .prop_map(|recs| {
            recs.into_iter()
                .map(|(d, ns)| rec(d, &ns.iter().map(String::as_str).collect::<Vec<_>>()))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn report_invariants(recs in arb_recordings(), listed in prop::collection::vec(0usize..8, 0..4)) {
            let db = TrackerDb::from_lists([TrackerList::with_entries(
                "t",
                listed.iter().map(|i| (fq(&format!("n{i}.example")), false)),
            )]);
            let refs: Vec<&MinimizedRecording> = recs.iter().collect();
            let view = prune_unique_domains(&refs);
            let r = report_from_view("x", &view, &db);
            prop_assert!(r.unique_subdomains >= r.unique_domains);
            prop_assert!((0.0..=1.0).contains(&r.tracker_domain_share));
            prop_assert!((0.0..=1.0).contains(&r.tracker_request_share));
            let surviving: usize = recs.iter().flat_map(|x| &x.entries).filter(|e| view.kept.contains(&e.qname)).count();
            prop_assert_eq!(r.total_requests, surviving);
        }

        #[test]
        fn table_is_permutation(shares in prop::collection::vec(0.0f64..1.0, 0..20), desc in any::<bool>()) {
            let reports: Vec<AppReport> = shares.iter().enumerate().map(|(i, s)| report(&format!("app{i:02}"), *s, i)).collect();
            let sorted = comparison_table(reports.clone(), Metric::UniqueDomains, desc);
            let mut a: Vec<String> = reports.into_iter().map(|r| r.app_bundle_id).collect();
            let mut b: Vec<String> = sorted.iter().map(|r| r.app_bundle_id.clone()).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn summary_bounds(rates in prop::collection::vec(0.0f64..100.0, 1..10)) {
            let rs: Vec<AppReport> = rates.iter().map(|&x| AppReport { avg_req_per_min: x, ..report("a", x / 100.0, 3) }).collect();
            for m in summarize(&rs).unwrap() {
                prop_assert!(m.min <= m.avg + 1e-9 && m.avg <= m.max + 1e-9);
            }
        }

        #[test]
        fn identical_cohorts_have_zero_delta(recs in arb_recordings()) {
            let refs: Vec<&MinimizedRecording> = recs.iter().collect();
            let r = app_report("x", &refs, &TrackerDb::new());
            prop_assert!(cohort_deltas(&r, &r).iter().all(|d| d.delta == 0.0));
        }
    }
}
