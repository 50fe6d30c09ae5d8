//! Registrable-domain computation against a vendored public suffix snapshot.
//!
//! Only the ICANN section of the list is used, so hosting platforms such as
//! `amazonaws.com` count as one registrable domain.

use std::sync::LazyLock;

use publicsuffix::{List, Psl};

use crate::fqdn::Fqdn;

pub const SNAPSHOT: &str = include_str!("../../data/public_suffix_list.dat");
const PRIVATE_MARKER: &str = "// ===BEGIN PRIVATE DOMAINS===";

static LIST: LazyLock<List> = LazyLock::new(|| {
    let icann = SNAPSHOT.split(PRIVATE_MARKER).next().unwrap_or(SNAPSHOT);
    icann.parse().expect("vendored public suffix list parses")
});

/// Public suffix plus one label. Names that are themselves a public suffix
/// (or a single label) map to themselves; unknown suffixes fall back to the
/// last two labels.
pub fn registrable_domain(fqdn: &Fqdn) -> Fqdn {
    let labels = fqdn.label_count();
    if labels <= 1 {
        return fqdn.clone();
    }
    match LIST.domain(fqdn.as_str().as_bytes()) {
        Some(d) => {
            let d = std::str::from_utf8(d.as_bytes()).expect("suffix of an ASCII name");
            Fqdn::new(d).expect("suffix of a valid name")
        }
        None if LIST.suffix(fqdn.as_str().as_bytes()).is_some() => fqdn.clone(),
        None => {
            let tail: Vec<&str> = fqdn.labels().rev().take(2).collect();
            Fqdn::new(&format!("{}.{}", tail[1], tail[0])).expect("suffix of a valid name")
        }
    }
}
