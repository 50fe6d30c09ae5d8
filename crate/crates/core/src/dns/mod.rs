//! DNS capture: query decoding, filter decisions, and the forwarding proxy.

pub mod filter;
pub mod proxy;
pub mod wire;

pub use filter::{decide, FilterDecision, FilterMode, FilterRule, FilterSet, SharedFilters};
pub use proxy::{handle, CapturedQuery, Proxy, ProxyConfig};
pub use wire::{parse_query, DnsQuery, MalformedPacket, Rcode};
