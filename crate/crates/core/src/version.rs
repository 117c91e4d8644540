//! Platform versions: strict `major.minor.patch` triples.
//!
//! Deployment gates on exact equality between a component's required
//! platform version and the target tier's version; there is no range
//! syntax on purpose.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Version {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
}

impl Version {
    pub fn new(major: u64, minor: u64, patch: u64) -> Self {
        Version {
            major,
            minor,
            patch,
        }
    }

    pub fn parse(s: &str) -> Result<Version> {
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() != 3 {
            return Err(Error::MalformedVersion(s.to_string()));
        }
        let num = |p: &str| -> Result<u64> {
            if p.is_empty() || !p.chars().all(|c| c.is_ascii_digit()) {
                return Err(Error::MalformedVersion(s.to_string()));
            }
            p.parse().map_err(|_| Error::MalformedVersion(s.to_string()))
        };
        Ok(Version {
            major: num(parts[0])?,
            minor: num(parts[1])?,
            patch: num(parts[2])?,
        })
    }
}

impl std::fmt::Display for Version {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

impl TryFrom<String> for Version {
    type Error = Error;
    fn try_from(s: String) -> Result<Version> {
        Version::parse(&s)
    }
}

impl From<Version> for String {
    fn from(v: Version) -> String {
        v.to_string()
    }
}

/// The deployment gate: required must equal actual exactly.
pub fn check_version(required: Version, actual: Version) -> Result<()> {
    if required == actual {
        Ok(())
    } else {
        Err(Error::VersionMismatch {
            required: required.to_string(),
            actual: actual.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let v = Version::parse("1.2.30").unwrap();
        assert_eq!(v, Version::new(1, 2, 30));
        assert_eq!(v.to_string(), "1.2.30");
    }

    #[test]
    fn malformed_versions_rejected() {
        for bad in ["1.2", "1.2.3.4", "1.2.x", "", "1..3", "v1.2.3", "1.2.-3"] {
            assert!(Version::parse(bad).is_err(), "{bad:?} should fail");
        }
    }

    #[test]
    fn gate_requires_exact_equality() {
        let a = Version::new(1, 0, 0);
        assert!(check_version(a, a).is_ok());
        for other in [
            Version::new(1, 0, 1),
            Version::new(1, 1, 0),
            Version::new(2, 0, 0),
            Version::new(0, 9, 9),
        ] {
            let err = check_version(other, a).unwrap_err();
            assert_eq!(err.variant_name(), "VersionMismatch");
        }
    }
}
