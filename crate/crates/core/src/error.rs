//! Crate-wide error type.
//!
//! One flat enum keeps call sites uniform across the layers; variants are
//! grouped by the subsystem that raises them. Everything is cloneable and
//! comparable so tests can assert on exact failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    // Tiers and topology.
    #[error("unknown tier {0}")]
    UnknownTier(String),
    #[error("duplicate tier {0}")]
    DuplicateTier(String),
    #[error("tiers {0} and {1} are not adjacent")]
    NonAdjacentTiers(String, String),

    // Microdatabases and stores.
    #[error("unknown microdatabase {0}")]
    UnknownMdb(String),
    #[error("duplicate microdatabase name {name} in tier {tier}")]
    DuplicateMdbName { tier: String, name: String },
    #[error("unknown store {0}")]
    UnknownStore(String),
    #[error("duplicate store {0}")]
    DuplicateStore(String),
    #[error("{principal} not authorized for {action} on {scope}")]
    Unauthorized {
        principal: String,
        action: String,
        scope: String,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("kind mismatch: {0}")]
    KindMismatch(String),
    #[error("not found: {store} key {key} ts {ts}")]
    NotFound { store: String, key: String, ts: i64 },
    #[error("invalid range: {t0}..{t1}")]
    InvalidRange { t0: i64, t1: i64 },

    // Information model.
    #[error("conflicting redefinition of asset type {0}")]
    ConflictingRedefinition(String),
    #[error("unknown asset type {0}")]
    UnknownType(String),
    #[error("dangling binding: {0}")]
    DanglingBinding(String),

    // Principals and policy.
    #[error("unknown token")]
    UnknownToken,
    #[error("duplicate token")]
    DuplicateToken,
    #[error("unknown principal {0}")]
    UnknownPrincipal(String),
    #[error("duplicate principal {0}")]
    DuplicatePrincipal(String),
    #[error("stale policy version {offered} (current {current})")]
    StalePolicyVersion { current: u64, offered: u64 },
    #[error("malformed policy at line {line}: {reason}")]
    MalformedPolicy { line: usize, reason: String },

    // Events.
    #[error("cross-tier subscription: handler in {handler_tier}, microdatabase in {mdb_tier}")]
    CrossTierSubscription {
        handler_tier: String,
        mdb_tier: String,
    },
    #[error("unknown subscription {0}")]
    UnknownSubscription(u64),

    // Replication.
    #[error("link {0} is down")]
    LinkDown(String),
    #[error("unknown link {0}")]
    UnknownLink(String),
    #[error("duplicate link {0}")]
    DuplicateLink(String),
    #[error("malformed sync batch: {0}")]
    MalformedBatch(String),

    // Work requests.
    #[error("no work-store route from {from} to {to}")]
    UnreachableTarget { from: String, to: String },
    #[error("unknown work request {0}")]
    UnknownRequest(String),
    #[error("duplicate work request {0}")]
    DuplicateRequest(String),
    #[error("invalid work transition {from} -> {to}")]
    InvalidTransition { from: String, to: String },

    // Interoperability register.
    #[error("alias ({scheme}, {value}) already maps to {existing}")]
    ConflictingAlias {
        scheme: String,
        value: String,
        existing: String,
    },
    #[error("unknown alias ({scheme}, {value})")]
    UnknownAlias { scheme: String, value: String },

    // Versioning.
    #[error("platform version mismatch: required {required}, actual {actual}")]
    VersionMismatch { required: String, actual: String },
    #[error("malformed version: {0}")]
    MalformedVersion(String),

    // App framework.
    #[error("unknown slot {0}")]
    UnknownSlot(String),
    #[error("unresolved input {slot}: {detail}")]
    UnresolvedInput { slot: String, detail: String },
    #[error("compute failure: {0}")]
    ComputeFailure(String),
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("unknown app {0}")]
    UnknownApp(String),
    #[error("cross-tier reference: {0}")]
    CrossTierReference(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("provider connection {0} not declared")]
    UndeclaredProvider(String),
    #[error("provider failure: {0}")]
    ProviderFailure(String),
    #[error("unknown provider {0}")]
    UnknownProvider(String),
    #[error("tier {0} has no config store")]
    NoConfigStore(String),

    // App store.
    #[error("content hash mismatch: manifest {expected}, computed {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("catalog already holds {name} {version}")]
    DuplicateVersion { name: String, version: String },
    #[error("unacknowledged connection {0}")]
    UnacknowledgedConnection(String),
    #[error("unknown catalog entry {name} {version}")]
    UnknownEntry { name: String, version: String },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
}

impl Error {
    /// Stable variant name, used by the scenario runner's `expect-err`.
    pub fn variant_name(&self) -> &'static str {
        match self {
            Error::UnknownTier(_) => "UnknownTier",
            Error::DuplicateTier(_) => "DuplicateTier",
            Error::NonAdjacentTiers(_, _) => "NonAdjacentTiers",
            Error::UnknownMdb(_) => "UnknownMdb",
            Error::DuplicateMdbName { .. } => "DuplicateMdbName",
            Error::UnknownStore(_) => "UnknownStore",
            Error::DuplicateStore(_) => "DuplicateStore",
            Error::Unauthorized { .. } => "Unauthorized",
            Error::InvalidValue(_) => "InvalidValue",
            Error::KindMismatch(_) => "KindMismatch",
            Error::NotFound { .. } => "NotFound",
            Error::InvalidRange { .. } => "InvalidRange",
            Error::ConflictingRedefinition(_) => "ConflictingRedefinition",
            Error::UnknownType(_) => "UnknownType",
            Error::DanglingBinding(_) => "DanglingBinding",
            Error::UnknownToken => "UnknownToken",
            Error::DuplicateToken => "DuplicateToken",
            Error::UnknownPrincipal(_) => "UnknownPrincipal",
            Error::DuplicatePrincipal(_) => "DuplicatePrincipal",
            Error::StalePolicyVersion { .. } => "StalePolicyVersion",
            Error::MalformedPolicy { .. } => "MalformedPolicy",
            Error::CrossTierSubscription { .. } => "CrossTierSubscription",
            Error::UnknownSubscription(_) => "UnknownSubscription",
            Error::LinkDown(_) => "LinkDown",
            Error::UnknownLink(_) => "UnknownLink",
            Error::DuplicateLink(_) => "DuplicateLink",
            Error::MalformedBatch(_) => "MalformedBatch",
            Error::UnreachableTarget { .. } => "UnreachableTarget",
            Error::UnknownRequest(_) => "UnknownRequest",
            Error::DuplicateRequest(_) => "DuplicateRequest",
            Error::InvalidTransition { .. } => "InvalidTransition",
            Error::ConflictingAlias { .. } => "ConflictingAlias",
            Error::UnknownAlias { .. } => "UnknownAlias",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::MalformedVersion(_) => "MalformedVersion",
            Error::UnknownSlot(_) => "UnknownSlot",
            Error::UnresolvedInput { .. } => "UnresolvedInput",
            Error::ComputeFailure(_) => "ComputeFailure",
            Error::UnknownService(_) => "UnknownService",
            Error::UnknownApp(_) => "UnknownApp",
            Error::CrossTierReference(_) => "CrossTierReference",
            Error::UnknownParam(_) => "UnknownParam",
            Error::UndeclaredProvider(_) => "UndeclaredProvider",
            Error::ProviderFailure(_) => "ProviderFailure",
            Error::UnknownProvider(_) => "UnknownProvider",
            Error::NoConfigStore(_) => "NoConfigStore",
            Error::HashMismatch { .. } => "HashMismatch",
            Error::DuplicateVersion { .. } => "DuplicateVersion",
            Error::UnacknowledgedConnection(_) => "UnacknowledgedConnection",
            Error::UnknownEntry { .. } => "UnknownEntry",
            Error::MalformedManifest(_) => "MalformedManifest",
        }
    }
}
