//! Capture the DNS-level network behavior of applications, share minimized
//! recordings, and aggregate crowd-contributed recordings into per-app
//! metrics, comparisons, and tracker candidates.

pub mod aggregator;
pub mod clock;
pub mod cooccurrence;
pub mod dns;
pub mod fqdn;
pub mod logstore;
pub mod minimizer;
pub mod monitor;
pub mod trackerdb;

pub use fqdn::{Fqdn, FqdnError};
