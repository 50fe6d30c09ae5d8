//! User-defined ignore/block rules and the per-query filter decision.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::fqdn::Fqdn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// Forward upstream without logging.
    Ignore,
    /// Refuse resolution and log the attempt.
    Block,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRule {
    pub pattern: Fqdn,
    pub mode: FilterMode,
    #[serde(default)]
    pub include_subdomains: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    LogAndForward,
    IgnoreForward,
    BlockDrop,
}

/// A rule set holding at most one rule per pattern.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterSet {
    rules: BTreeMap<Fqdn, (FilterMode, bool)>,
}

impl FilterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `rule`, replacing any existing rule for the same pattern.
    pub fn insert(&mut self, rule: FilterRule) -> Option<FilterRule> {
        self.rules
            .insert(rule.pattern.clone(), (rule.mode, rule.include_subdomains))
            .map(|(mode, include_subdomains)| FilterRule {
                pattern: rule.pattern,
                mode,
                include_subdomains,
            })
    }

    pub fn remove(&mut self, pattern: &Fqdn) -> bool {
        self.rules.remove(pattern).is_some()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = FilterRule> + '_ {
        self.rules.iter().map(|(pattern, &(mode, include_subdomains))| FilterRule {
            pattern: pattern.clone(),
            mode,
            include_subdomains,
        })
    }

    /// The most specific rule that applies to `qname`, if any.
    pub fn matching_rule(&self, qname: &Fqdn) -> Option<FilterRule> {
        for (depth, suffix) in qname.suffixes().enumerate() {
            // Suffixes of a valid name are themselves valid.
            let key = Fqdn::new(suffix).ok()?;
            if let Some(&(mode, include_subdomains)) = self.rules.get(&key) {
                if depth == 0 || include_subdomains {
                    return Some(FilterRule { pattern: key, mode, include_subdomains });
                }
            }
        }
        None
    }
}

impl FromIterator<FilterRule> for FilterSet {
    fn from_iter<I: IntoIterator<Item = FilterRule>>(iter: I) -> Self {
        let mut set = FilterSet::new();
        for rule in iter {
            set.insert(rule);
        }
        set
    }
}

impl Serialize for FilterSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.rules())
    }
}

impl<'de> Deserialize<'de> for FilterSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(Vec::<FilterRule>::deserialize(deserializer)?.into_iter().collect())
    }
}

impl FilterSet {
    /// Reads a rule file; a missing file is an empty set.
    pub fn load(path: &Path) -> io::Result<Self> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(FilterSet::new()),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)
    }
}

/// Decides what the proxy does with a query for `qname`.
///
/// While a recording is active every query is logged and forwarded so the
/// recording shows unaltered app behavior.
pub fn decide(qname: &Fqdn, rules: &FilterSet, recording_active: bool) -> FilterDecision {
    if recording_active {
        return FilterDecision::LogAndForward;
    }
    match rules.matching_rule(qname).map(|r| r.mode) {
        Some(FilterMode::Block) => FilterDecision::BlockDrop,
        Some(FilterMode::Ignore) => FilterDecision::IgnoreForward,
        None => FilterDecision::LogAndForward,
    }
}

/// Rule set shared between the proxy and whoever edits it. Readers always
/// get a complete snapshot.
#[derive(Debug, Default)]
pub struct SharedFilters {
    current: RwLock<Arc<FilterSet>>,
}

impl SharedFilters {
    pub fn new(set: FilterSet) -> Self {
        SharedFilters { current: RwLock::new(Arc::new(set)) }
    }

    pub fn snapshot(&self) -> Arc<FilterSet> {
        Arc::clone(&self.current.read().expect("filter lock poisoned"))
    }

    /// Applies `edit` to a copy of the current set and swaps it in.
    pub fn update<R>(&self, edit: impl FnOnce(&mut FilterSet) -> R) -> (R, Arc<FilterSet>) {
        let mut guard = self.current.write().expect("filter lock poisoned");
        let mut next = FilterSet::clone(&guard);
        let out = edit(&mut next);
        let next = Arc::new(next);
        *guard = Arc::clone(&next);
        (out, next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fq(s: &str) -> Fqdn {
        Fqdn::new(s).unwrap()
    }

    fn rule(p: &str, mode: FilterMode, subs: bool) -> FilterRule {
        FilterRule { pattern: fq(p), mode, include_subdomains: subs }
    }

    #[test]
    fn subdomain_block_applies() {
        let set: FilterSet = [rule("unity3d.com", FilterMode::Block, true)].into_iter().collect();
        assert_eq!(decide(&fq("config.unity3d.com"), &set, false), FilterDecision::BlockDrop);
        assert_eq!(decide(&fq("unity3d.com"), &set, false), FilterDecision::BlockDrop);
    }

    #[test]
    fn lookalike_suffix_does_not_match() {
        let set: FilterSet = [rule("unity3d.com", FilterMode::Block, true)].into_iter().collect();
        assert_eq!(
            decide(&fq("unity3d.com.evil.example"), &set, false),
            FilterDecision::LogAndForward
        );
        assert_eq!(decide(&fq("notunity3d.com"), &set, false), FilterDecision::LogAndForward);
    }

    #[test]
    fn recording_suspends_filters() {
        let set: FilterSet = [rule("app.adjust.com", FilterMode::Ignore, false)].into_iter().collect();
        assert_eq!(decide(&fq("app.adjust.com"), &set, true), FilterDecision::LogAndForward);
        assert_eq!(decide(&fq("app.adjust.com"), &set, false), FilterDecision::IgnoreForward);
    }

    #[test]
    fn exact_rule_without_subdomains_only_hits_itself() {
        let set: FilterSet = [rule("adjust.com", FilterMode::Ignore, false)].into_iter().collect();
        assert_eq!(decide(&fq("adjust.com"), &set, false), FilterDecision::IgnoreForward);
        assert_eq!(decide(&fq("app.adjust.com"), &set, false), FilterDecision::LogAndForward);
    }

    #[test]
    fn deepest_rule_wins() {
        let set: FilterSet = [
            rule("example.com", FilterMode::Block, true),
            rule("cdn.example.com", FilterMode::Ignore, true),
            rule("x.cdn.example.com", FilterMode::Block, false),
        ]
        .into_iter()
        .collect();
        assert_eq!(decide(&fq("a.cdn.example.com"), &set, false), FilterDecision::IgnoreForward);
        assert_eq!(decide(&fq("x.cdn.example.com"), &set, false), FilterDecision::BlockDrop);
        assert_eq!(decide(&fq("www.example.com"), &set, false), FilterDecision::BlockDrop);
        // A non-covering rule on a closer ancestor is skipped.
        assert_eq!(decide(&fq("y.x.cdn.example.com"), &set, false), FilterDecision::IgnoreForward);
    }

    #[test]
    fn one_rule_per_pattern() {
        let mut set = FilterSet::new();
        set.insert(rule("a.com", FilterMode::Ignore, false));
        let old = set.insert(rule("a.com", FilterMode::Block, true));
        assert_eq!(old.unwrap().mode, FilterMode::Ignore);
        assert_eq!(set.len(), 1);
        assert_eq!(decide(&fq("b.a.com"), &set, false), FilterDecision::BlockDrop);
    }

    #[test]
    fn shared_snapshots_are_stable() {
        let shared = SharedFilters::new(FilterSet::new());
        let before = shared.snapshot();
        shared.update(|s| s.insert(rule("a.com", FilterMode::Block, false)));
        assert!(before.is_empty());
        assert_eq!(shared.snapshot().len(), 1);
    }

    fn name() -> impl Strategy<Value = Fqdn> {
        prop::collection::vec("[a-c]{1,3}", 1..5).prop_map(|l| fq(&l.join(".")))
    }

    fn rules() -> impl Strategy<Value = FilterSet> {
        prop::collection::vec((name(), any::<bool>(), any::<bool>()), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(p, block, subs)| FilterRule {
                    pattern: p,
                    mode: if block { FilterMode::Block } else { FilterMode::Ignore },
                    include_subdomains: subs,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn recording_always_logs(q in name(), set in rules()) {
            prop_assert_eq!(decide(&q, &set, true), FilterDecision::LogAndForward);
        }

        #[test]
        fn no_match_across_non_label_boundary(prefix in "[a-c]{1,3}", p in name()) {
            // prefix glued directly onto the pattern, no dot in between
            let q = fq(&format!("{prefix}{p}"));
            let set: FilterSet = [FilterRule { pattern: p.clone(), mode: FilterMode::Block, include_subdomains: true }]
                .into_iter().collect();
            prop_assert_eq!(decide(&q, &set, false), FilterDecision::LogAndForward);
        }

        #[test]
        fn matched_rule_covers_name(q in name(), set in rules()) {
            if let Some(r) = set.matching_rule(&q) {
                prop_assert!(r.pattern == q || (r.include_subdomains && q.is_subdomain_of(&r.pattern)));
            }
        }
    }
}
