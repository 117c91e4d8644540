//! Interoperability register: per-tier mapping from external identifiers
//! to canonical asset ids.
//!
//! Different source systems name the same asset differently (an owner tag,
//! a grid operator id, a vendor serial, a geographic position). Each tier
//! keeps a register of (scheme, value) -> canonical id so data keyed by any
//! external identity can be attributed to one asset. Remapping an existing
//! alias is an error; re-registering the identical mapping is idempotent.

use crate::error::{Error, Result};
use crate::ids::CanonicalId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AliasRegister {
    entries: BTreeMap<(String, String), CanonicalId>,
}

impl AliasRegister {
    pub fn register(&mut self, scheme: &str, value: &str, canonical: CanonicalId) -> Result<()> {
        let k = (scheme.to_string(), value.to_string());
        if let Some(existing) = self.entries.get(&k) {
            if *existing == canonical {
                return Ok(());
            }
            return Err(Error::ConflictingAlias {
                scheme: scheme.to_string(),
                value: value.to_string(),
                existing: existing.to_string(),
            });
        }
        self.entries.insert(k, canonical);
        Ok(())
    }

    pub fn resolve(&self, scheme: &str, value: &str) -> Result<&CanonicalId> {
        self.entries
            .get(&(scheme.to_string(), value.to_string()))
            .ok_or_else(|| Error::UnknownAlias {
                scheme: scheme.to_string(),
                value: value.to_string(),
            })
    }

    /// First external value (in sorted order) registered for `canonical`
    /// under `scheme`. Used to substitute external identities back into
    /// binding patterns and provider queries.
    pub fn reverse(&self, scheme: &str, canonical: &CanonicalId) -> Option<&str> {
        self.entries
            .iter()
            .find(|((s, _), c)| s == scheme && *c == canonical)
            .map(|((_, v), _)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &CanonicalId)> {
        self.entries
            .iter()
            .map(|((s, v), c)| (s.as_str(), v.as_str(), c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
