//! Fully qualified domain names as they appear in DNS questions.
//!
//! An [`Fqdn`] is always lowercase, has no trailing dot, and satisfies the
//! RFC 1035 length limits. Only letters, digits, `-` and `_` are accepted in
//! labels, which keeps names safe to embed in the tab-separated export and
//! the JSON upload document.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MAX_NAME_LEN: usize = 253;
pub const MAX_LABEL_LEN: usize = 63;
pub const MAX_LABELS: usize = 127;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FqdnError {
    #[error("empty domain name")]
    Empty,
    #[error("domain name longer than {MAX_NAME_LEN} bytes")]
    TooLong,
    #[error("more than {MAX_LABELS} labels")]
    TooManyLabels,
    #[error("empty label")]
    EmptyLabel,
    #[error("label longer than {MAX_LABEL_LEN} bytes")]
    LabelTooLong,
    #[error("invalid character {0:?} in label")]
    InvalidChar(char),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fqdn(String);

impl Fqdn {
    /// Validates and normalizes `name`. A single trailing dot is accepted and
    /// stripped; ASCII letters are lowercased.
    pub fn new(name: &str) -> Result<Self, FqdnError> {
        let name = name.strip_suffix('.').unwrap_or(name);
        if name.is_empty() {
            return Err(FqdnError::Empty);
        }
        if name.len() > MAX_NAME_LEN {
            return Err(FqdnError::TooLong);
        }
        let mut labels = 0;
        for label in name.split('.') {
            labels += 1;
            validate_label(label.as_bytes())?;
        }
        if labels > MAX_LABELS {
            return Err(FqdnError::TooManyLabels);
        }
        Ok(Fqdn(name.to_ascii_lowercase()))
    }

    /// Builds a name from raw wire labels.
    pub fn from_labels<'a, I>(labels: I) -> Result<Self, FqdnError>
    where
        I: IntoIterator<Item = &'a [u8]>,
    {
        let mut name = String::new();
        let mut count = 0;
        for label in labels {
            validate_label(label)?;
            count += 1;
            if count > MAX_LABELS {
                return Err(FqdnError::TooManyLabels);
            }
            if !name.is_empty() {
                name.push('.');
            }
            for &b in label {
                name.push(b.to_ascii_lowercase() as char);
            }
            if name.len() > MAX_NAME_LEN {
                return Err(FqdnError::TooLong);
            }
        }
        if name.is_empty() {
            return Err(FqdnError::Empty);
        }
        Ok(Fqdn(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn labels(&self) -> impl DoubleEndedIterator<Item = &str> {
        self.0.split('.')
    }

    pub fn label_count(&self) -> usize {
        self.0.split('.').count()
    }

    /// True when `self` is a strict descendant of `parent` on a label boundary.
    pub fn is_subdomain_of(&self, parent: &Fqdn) -> bool {
        let (me, p) = (self.0.as_str(), parent.0.as_str());
        me.len() > p.len() && me.ends_with(p) && me.as_bytes()[me.len() - p.len() - 1] == b'.'
    }

    /// `self` followed by every ancestor up to the top-level label,
    /// deepest first.
    pub fn suffixes(&self) -> impl Iterator<Item = &str> {
        let s = self.0.as_str();
        std::iter::once(s).chain(s.match_indices('.').map(move |(i, _)| &s[i + 1..]))
    }
}

fn validate_label(label: &[u8]) -> Result<(), FqdnError> {
    if label.is_empty() {
        return Err(FqdnError::EmptyLabel);
    }
    if label.len() > MAX_LABEL_LEN {
        return Err(FqdnError::LabelTooLong);
    }
    for &b in label {
        if !(b.is_ascii_alphanumeric() || b == b'-' || b == b'_') {
            return Err(FqdnError::InvalidChar(b as char));
        }
    }
    Ok(())
}

impl fmt::Display for Fqdn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Fqdn {
    type Err = FqdnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Fqdn::new(s)
    }
}

impl AsRef<str> for Fqdn {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for Fqdn {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Fqdn {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Fqdn::new(&s).map_err(serde::de::Error::custom)
    }
}
