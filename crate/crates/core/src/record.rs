//! Records and the merge rule.
//!
//! Record identity is the pair (key, ts); revision counts local overwrites
//! of that identity and starts at 1. `origin` is the replica that performed
//! the last local mutation, and `origin_clock` is that replica's write
//! counter at the time, stamped exactly once and carried unchanged through
//! replication. Deletes are tombstones: identity, revision, and origin
//! survive, the value does not.

use crate::ids::ReplicaId;
use crate::value::Value;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub key: String,
    pub ts: i64,
    /// `None` is a tombstone.
    pub value: Option<Value>,
    pub revision: u64,
    pub origin: ReplicaId,
    pub origin_clock: u64,
}

impl Record {
    pub fn is_tombstone(&self) -> bool {
        self.value.is_none()
    }

    /// Canonical single-line form used by snapshots and store digests.
    pub fn canonical_line(&self) -> String {
        let body = match &self.value {
            Some(v) => v.canonical_text(),
            None => "tombstone".to_string(),
        };
        format!(
            "record {} {} rev={} origin={} clock={} {}",
            crate::value::quote_if_needed(&self.key),
            self.ts,
            self.revision,
            self.origin,
            self.origin_clock,
            body
        )
    }
}

/// Outcome of merging an incoming replicated record against local state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeDecision {
    /// No local record at this identity; take the incoming one.
    TakeAbsent,
    /// Incoming wins over a differing local record.
    TakeIncoming,
    /// Local wins over a differing incoming record.
    KeepLocal,
    /// Same revision and origin: the same version, nothing to do.
    Identical,
}

impl MergeDecision {
    pub fn applies(&self) -> bool {
        matches!(self, MergeDecision::TakeAbsent | MergeDecision::TakeIncoming)
    }

    /// True when two differing versions met and one had to be chosen.
    pub fn resolved_conflict(&self) -> bool {
        matches!(self, MergeDecision::TakeIncoming | MergeDecision::KeepLocal)
    }
}

/// Last-writer-wins at fixed (key, ts): higher revision wins; on a revision
/// tie the lexicographically larger origin replica id wins. Deterministic
/// and symmetric, so merging in either order converges. Tombstones take
/// part exactly like ordinary records.
pub fn merge(local: Option<&Record>, incoming: &Record) -> MergeDecision {
    let Some(local) = local else {
        return MergeDecision::TakeAbsent;
    };
    debug_assert_eq!((local.key.as_str(), local.ts), (incoming.key.as_str(), incoming.ts));
    match incoming.revision.cmp(&local.revision) {
        std::cmp::Ordering::Greater => MergeDecision::TakeIncoming,
        std::cmp::Ordering::Less => MergeDecision::KeepLocal,
        std::cmp::Ordering::Equal => match incoming.origin.cmp(&local.origin) {
            std::cmp::Ordering::Greater => MergeDecision::TakeIncoming,
            std::cmp::Ordering::Less => MergeDecision::KeepLocal,
            std::cmp::Ordering::Equal => MergeDecision::Identical,
        },
    }
}
