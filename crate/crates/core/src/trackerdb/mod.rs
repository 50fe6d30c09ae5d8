//! Known-tracker classification and registrable-domain computation.

mod lists;
mod psl;

use std::collections::HashMap;

use serde::Serialize;

use crate::fqdn::Fqdn;

pub use lists::{parse_domain_list, parse_hosts_list, ListEntry, ParsedList, TrackerList};
pub use psl::registrable_domain;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub fqdn: Fqdn,
    pub is_tracker: bool,
    pub matched_pattern: Option<Fqdn>,
    pub source: Option<String>,
}

impl Classification {
    fn clean(fqdn: &Fqdn) -> Self {
        Classification { fqdn: fqdn.clone(), is_tracker: false, matched_pattern: None, source: None }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Coverage {
    // Index into `TrackerDb::sources` of the first list that declares each kind.
    exact: Option<usize>,
    subtree: Option<usize>,
}

/// Union of any number of tracker lists, indexed by pattern.
#[derive(Debug, Clone, Default)]
pub struct TrackerDb {
    sources: Vec<String>,
    index: HashMap<String, Coverage>,
}

impl TrackerDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_lists<I: IntoIterator<Item = TrackerList>>(lists: I) -> Self {
        let mut db = TrackerDb::new();
        for list in lists {
            db.add(list);
        }
        db
    }

    pub fn add(&mut self, list: TrackerList) {
        let source = self.sources.len();
        self.sources.push(list.source_name);
        for entry in list.entries {
            let slot = self.index.entry(entry.pattern.as_str().to_owned()).or_default();
            let kind = if entry.include_subdomains { &mut slot.subtree } else { &mut slot.exact };
            kind.get_or_insert(source);
        }
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn pattern_count(&self) -> usize {
        self.index.len()
    }

    pub fn classify(&self, fqdn: &Fqdn) -> Classification {
        for (depth, suffix) in fqdn.suffixes().enumerate() {
            let Some(cov) = self.index.get(suffix) else { continue };
            let hit = if depth == 0 { cov.exact.or(cov.subtree) } else { cov.subtree };
            if let Some(source) = hit {
                return Classification {
                    fqdn: fqdn.clone(),
                    is_tracker: true,
                    matched_pattern: Some(Fqdn::new(suffix).expect("suffix of a valid name")),
                    source: Some(self.sources[source].clone()),
                };
            }
        }
        Classification::clean(fqdn)
    }

    pub fn is_tracker(&self, fqdn: &Fqdn) -> bool {
        self.classify(fqdn).is_tracker
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fq(s: &str) -> Fqdn {
        Fqdn::new(s).unwrap()
    }

    fn db(entries: &[(&str, bool)]) -> TrackerDb {
        TrackerDb::from_lists([TrackerList::with_entries("t", entries.iter().map(|&(p, s)| (fq(p), s)))])
    }

    #[test]
    fn subdomain_covering_entry() {
        let c = db(&[("adjust.com", true)]).classify(&fq("app.adjust.com"));
        assert!(c.is_tracker);
        assert_eq!(c.matched_pattern, Some(fq("adjust.com")));
        assert_eq!(c.source.as_deref(), Some("t"));
    }

    #[test]
    fn label_boundary() {
        assert!(!db(&[("adjust.com", true)]).is_tracker(&fq("notadjust.com")));
    }

    #[test]
    fn empty_db() {
        let c = TrackerDb::new().classify(&fq("example.org"));
        assert_eq!(c, Classification::clean(&fq("example.org")));
    }

    #[test]
    fn exact_entry_only_matches_itself() {
        let d = db(&[("flurry.com", false)]);
        assert!(d.is_tracker(&fq("flurry.com")));
        assert!(!d.is_tracker(&fq("data.flurry.com")));
    }

    #[test]
    fn deepest_match_reported() {
        let d = db(&[("example.com", true), ("ads.example.com", true)]);
        assert_eq!(d.classify(&fq("x.ads.example.com")).matched_pattern, Some(fq("ads.example.com")));
    }

    #[test]
    fn first_source_wins_on_shared_pattern() {
        let d = TrackerDb::from_lists([
            TrackerList::with_entries("a", [(fq("x.com"), true)]),
            TrackerList::with_entries("b", [(fq("x.com"), true), (fq("y.com"), true)]),
        ]);
        assert_eq!(d.classify(&fq("x.com")).source.as_deref(), Some("a"));
        assert_eq!(d.classify(&fq("y.com")).source.as_deref(), Some("b"));
    }

    fn naive(lists: &[(String, bool)], name: &Fqdn) -> bool {
        lists.iter().any(|(p, subs)| {
            let p = fq(p);
            *name == p || (*subs && name.is_subdomain_of(&p))
        })
    }

    fn arb_name() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "ads", "com", "net"]), 1..5).prop_map(|v| v.join("."))
    }

    proptest! {
        #[test]
        fn matches_naive_and_is_monotone(
            base in prop::collection::vec((arb_name(), any::<bool>()), 0..8),
            extra in prop::collection::vec((arb_name(), any::<bool>()), 0..8),
            name in arb_name(),
        ) {
            let name = fq(&name);
            let small = TrackerDb::from_lists([TrackerList::with_entries("s", base.iter().map(|(p, s)| (fq(p), *s)))]);
            let mut big = small.clone();
            big.add(TrackerList::with_entries("x", extra.iter().map(|(p, s)| (fq(p), *s))));
            let c = small.classify(&name);
            prop_assert_eq!(c.is_tracker, naive(&base, &name));
            prop_assert_eq!(c.is_tracker, c.matched_pattern.is_some());
            if c.is_tracker {
                prop_assert!(big.is_tracker(&name));
            }
        }
    }
}
