//! Principals, grants, and EULA sharing policies.
//!
//! Identity is simulated: a token registry maps opaque tokens onto
//! principals, with no cryptography. Authorization is grant-based and
//! default-deny; `admin` implies read, write, and subscribe.
//!
//! A EULA policy is an ordered rule list evaluated first-match-wins per
//! store and direction, with an implicit terminal deny. The canonical text
//! form is line-oriented:
//!
//! ```text
//! policy <id>
//! version <n>
//! rule <store-glob> <outbound|inbound|both> <mode> [retention=<days>]
//! ```
//!
//! where `<mode>` is `deny`, `full`, `downsample:<interval_ms>`, or
//! `summarize:<mean|min|max|count>,<window_ms>`. `#` starts a comment.
//! Parsing accepts any keyword case and extra spaces; canonical output is
//! lowercase keywords and single spaces and round-trips byte-identically.

use crate::error::{Error, Result};
use crate::glob::glob_match;
use crate::ids::{PrincipalId, StoreId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Principals

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrincipalKind {
    Owner,
    App,
    AppService,
    Replicator,
    Platform,
}

impl PrincipalKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrincipalKind::Owner => "owner",
            PrincipalKind::App => "app",
            PrincipalKind::AppService => "app_service",
            PrincipalKind::Replicator => "replicator",
            PrincipalKind::Platform => "platform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "owner" => Ok(PrincipalKind::Owner),
            "app" => Ok(PrincipalKind::App),
            "app_service" => Ok(PrincipalKind::AppService),
            "replicator" => Ok(PrincipalKind::Replicator),
            "platform" => Ok(PrincipalKind::Platform),
            other => Err(Error::InvalidValue(format!("unknown principal kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub id: PrincipalId,
    pub kind: PrincipalKind,
}

/// Token -> principal lookup plus the principal directory. Several tokens
/// may name the same principal, but a token is registered once.
#[derive(Debug, Clone, Default)]
pub struct PrincipalRegistry {
    principals: BTreeMap<PrincipalId, Principal>,
    tokens: BTreeMap<String, PrincipalId>,
}

impl PrincipalRegistry {
    pub fn register(&mut self, id: PrincipalId, kind: PrincipalKind, token: &str) -> Result<()> {
        if self.tokens.contains_key(token) {
            return Err(Error::DuplicateToken);
        }
        if let Some(existing) = self.principals.get(&id) {
            if existing.kind != kind {
                return Err(Error::DuplicatePrincipal(id.to_string()));
            }
        } else {
            self.principals
                .insert(id.clone(), Principal { id: id.clone(), kind });
        }
        self.tokens.insert(token.to_string(), id);
        Ok(())
    }

    pub fn authenticate(&self, token: &str) -> Result<&Principal> {
        let id = self.tokens.get(token).ok_or(Error::UnknownToken)?;
        Ok(&self.principals[id])
    }

    pub fn get(&self, id: &PrincipalId) -> Result<&Principal> {
        self.principals
            .get(id)
            .ok_or_else(|| Error::UnknownPrincipal(id.to_string()))
    }

    pub fn exists(&self, id: &PrincipalId) -> bool {
        self.principals.contains_key(id)
    }
}

// ---------------------------------------------------------------------------
// Grants

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Read,
    Write,
    Subscribe,
    Admin,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Read => "read",
            Action::Write => "write",
            Action::Subscribe => "subscribe",
            Action::Admin => "admin",
        }
    }
}

/// A right set, stored as granted; `admin` implies the other three at
/// check time, not at storage time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Rights {
    pub read: bool,
    pub write: bool,
    pub subscribe: bool,
    pub admin: bool,
}

impl Rights {
    pub const ADMIN: Rights = Rights {
        read: false,
        write: false,
        subscribe: false,
        admin: true,
    };

    pub fn of(actions: &[Action]) -> Rights {
        let mut r = Rights::default();
        for a in actions {
            match a {
                Action::Read => r.read = true,
                Action::Write => r.write = true,
                Action::Subscribe => r.subscribe = true,
                Action::Admin => r.admin = true,
            }
        }
        r
    }

    pub fn allows(&self, action: Action) -> bool {
        match action {
            Action::Read => self.read || self.admin,
            Action::Write => self.write || self.admin,
            Action::Subscribe => self.subscribe || self.admin,
            Action::Admin => self.admin,
        }
    }

    pub fn parse(s: &str) -> Result<Rights> {
        let mut r = Rights::default();
        for part in s.split(',').filter(|p| !p.is_empty()) {
            match part {
                "read" => r.read = true,
                "write" => r.write = true,
                "subscribe" => r.subscribe = true,
                "admin" => r.admin = true,
                other => {
                    return Err(Error::InvalidValue(format!("unknown right {other}")));
                }
            }
        }
        Ok(r)
    }

    pub fn canonical_text(&self) -> String {
        let mut parts = Vec::new();
        if self.read {
            parts.push("read");
        }
        if self.write {
            parts.push("write");
        }
        if self.subscribe {
            parts.push("subscribe");
        }
        if self.admin {
            parts.push("admin");
        }
        parts.join(",")
    }
}

/// A grant scope: one store, or the whole microdatabase including stores
/// created later. Microdatabase-scoped operations (model access, granting,
/// policy changes, link configuration) require rights on `All`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StoreSelector {
    All,
    One(StoreId),
}

impl StoreSelector {
    pub fn covers(&self, store: Option<&StoreId>) -> bool {
        match (self, store) {
            (StoreSelector::All, _) => true,
            (StoreSelector::One(s), Some(t)) => s == t,
            (StoreSelector::One(_), None) => false,
        }
    }

    pub fn canonical_text(&self) -> String {
        match self {
            StoreSelector::All => "ALL".to_string(),
            StoreSelector::One(s) => s.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub principal: PrincipalId,
    pub selector: StoreSelector,
    pub rights: Rights,
}

/// Grants indexed by principal. Default deny: no grant, no access.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GrantTable {
    by_principal: BTreeMap<PrincipalId, Vec<Grant>>,
}

impl GrantTable {
    pub fn add(&mut self, grant: Grant) {
        self.by_principal
            .entry(grant.principal.clone())
            .or_default()
            .push(grant);
    }

    /// Remove the listed rights from every grant of `principal` whose
    /// selector equals `selector`. Grants left with no rights are dropped.
    pub fn revoke(&mut self, principal: &PrincipalId, selector: &StoreSelector, rights: Rights) {
        if let Some(grants) = self.by_principal.get_mut(principal) {
            for g in grants.iter_mut() {
                if g.selector == *selector {
                    if rights.read {
                        g.rights.read = false;
                    }
                    if rights.write {
                        g.rights.write = false;
                    }
                    if rights.subscribe {
                        g.rights.subscribe = false;
                    }
                    if rights.admin {
                        g.rights.admin = false;
                    }
                }
            }
            grants.retain(|g| {
                g.rights.read || g.rights.write || g.rights.subscribe || g.rights.admin
            });
            if grants.is_empty() {
                self.by_principal.remove(principal);
            }
        }
    }

    /// Default-deny check: some grant of this principal must cover the
    /// store scope and allow the action. `store = None` means the
    /// microdatabase scope (only `All` selectors apply).
    pub fn allowed(&self, principal: &PrincipalId, store: Option<&StoreId>, action: Action) -> bool {
        self.by_principal
            .get(principal)
            .map(|grants| {
                grants
                    .iter()
                    .any(|g| g.selector.covers(store) && g.rights.allows(action))
            })
            .unwrap_or(false)
    }

    pub fn all(&self) -> impl Iterator<Item = &Grant> {
        self.by_principal.values().flatten()
    }
}

// ---------------------------------------------------------------------------
// EULA policies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Outbound,
    Inbound,
    Both,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::Outbound => "outbound",
            Direction::Inbound => "inbound",
            Direction::Both => "both",
        }
    }

    pub fn matches(&self, flow: Flow) -> bool {
        matches!(
            (self, flow),
            (Direction::Both, _)
                | (Direction::Outbound, Flow::Outbound)
                | (Direction::Inbound, Flow::Inbound)
        )
    }
}

/// A concrete direction of data movement at sync time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Outbound,
    Inbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregate {
    Mean,
    Min,
    Max,
    Count,
}

impl Aggregate {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregate::Mean => "mean",
            Aggregate::Min => "min",
            Aggregate::Max => "max",
            Aggregate::Count => "count",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregate::Mean),
            "min" => Ok(Aggregate::Min),
            "max" => Ok(Aggregate::Max),
            "count" => Ok(Aggregate::Count),
            other => Err(Error::InvalidValue(format!("unknown aggregate {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShareMode {
    Deny,
    Full,
    Downsample { interval_ms: i64 },
    Summarize { agg: Aggregate, window_ms: i64 },
}

impl ShareMode {
    pub fn canonical_text(&self) -> String {
        match self {
            ShareMode::Deny => "deny".to_string(),
            ShareMode::Full => "full".to_string(),
            ShareMode::Downsample { interval_ms } => format!("downsample:{interval_ms}"),
            ShareMode::Summarize { agg, window_ms } => {
                format!("summarize:{},{}", agg.name(), window_ms)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub selector: String,
    pub direction: Direction,
    pub mode: ShareMode,
    /// `None` is unlimited retention.
    pub retention_days: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulaPolicy {
    pub policy_id: String,
    pub version: u64,
    pub rules: Vec<PolicyRule>,
}

/// The per-store, per-direction outcome of first-match evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingRule {
    pub mode: ShareMode,
    pub retention_days: Option<u32>,
}

impl SharingRule {
    pub const DENY: SharingRule = SharingRule {
        mode: ShareMode::Deny,
        retention_days: None,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionRules {
    pub outbound: SharingRule,
    pub inbound: SharingRule,
}

impl EulaPolicy {
    /// First rule whose selector matches the store and whose direction
    /// covers the flow; no match means deny (implicit terminal deny).
    pub fn rule_for(&self, store: &StoreId, flow: Flow) -> SharingRule {
        for rule in &self.rules {
            if rule.direction.matches(flow) && glob_match(&rule.selector, store.as_str()) {
                return SharingRule {
                    mode: rule.mode,
                    retention_days: rule.retention_days,
                };
            }
        }
        SharingRule::DENY
    }

    /// Evaluate the policy for every store name given.
    pub fn derive_store_rules(&self, stores: &[StoreId]) -> BTreeMap<StoreId, DirectionRules> {
        stores
            .iter()
            .map(|s| {
                (
                    s.clone(),
                    DirectionRules {
                        outbound: self.rule_for(s, Flow::Outbound),
                        inbound: self.rule_for(s, Flow::Inbound),
                    },
                )
            })
            .collect()
    }

    /// Most restrictive retention across both directions for a store;
    /// governs local purging.
    pub fn effective_retention_days(&self, store: &StoreId) -> Option<u32> {
        let o = self.rule_for(store, Flow::Outbound).retention_days;
        let i = self.rule_for(store, Flow::Inbound).retention_days;
        match (o, i) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        }
    }

    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("policy {}\n", self.policy_id));
        out.push_str(&format!("version {}\n", self.version));
        for r in &self.rules {
            out.push_str(&format!(
                "rule {} {} {}",
                r.selector,
                r.direction.name(),
                r.mode.canonical_text()
            ));
            if let Some(d) = r.retention_days {
                out.push_str(&format!(" retention={d}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<EulaPolicy> {
        let mut policy_id: Option<String> = None;
        let mut version: Option<u64> = None;
        let mut rules = Vec::new();
        for (ix, raw) in text.lines().enumerate() {
            let line = ix + 1;
            let mal = |reason: &str| Error::MalformedPolicy {
                line,
                reason: reason.to_string(),
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = content.split_whitespace().collect();
            match tokens[0].to_ascii_lowercase().as_str() {
                "policy" => {
                    if tokens.len() != 2 {
                        return Err(mal("expected: policy <id>"));
                    }
                    if policy_id.is_some() {
                        return Err(mal("duplicate policy line"));
                    }
                    policy_id = Some(tokens[1].to_string());
                }
                "version" => {
                    if tokens.len() != 2 {
                        return Err(mal("expected: version <n>"));
                    }
                    if version.is_some() {
                        return Err(mal("duplicate version line"));
                    }
                    version = Some(
                        tokens[1]
                            .parse()
                            .map_err(|_| mal("version must be a non-negative integer"))?,
                    );
                }
                "rule" => {
                    if tokens.len() < 4 || tokens.len() > 5 {
                        return Err(mal(
                            "expected: rule <selector> <direction> <mode> [retention=<days>]",
                        ));
                    }
                    let selector = tokens[1].to_string();
                    let direction = match tokens[2].to_ascii_lowercase().as_str() {
                        "outbound" => Direction::Outbound,
                        "inbound" => Direction::Inbound,
                        "both" => Direction::Both,
                        other => {
                            return Err(mal(&format!("unknown direction {other}")));
                        }
                    };
                    let mode = parse_mode(&tokens[3].to_ascii_lowercase())
                        .map_err(|reason| mal(&reason))?;
                    let retention_days = if tokens.len() == 5 {
                        let (k, v) = tokens[4]
                            .split_once('=')
                            .ok_or_else(|| mal("expected retention=<days>"))?;
                        if !k.eq_ignore_ascii_case("retention") {
                            return Err(mal(&format!("unknown rule option {k}")));
                        }
                        Some(
                            v.parse::<u32>()
                                .map_err(|_| mal("retention must be a non-negative integer"))?,
                        )
                    } else {
                        None
                    };
                    rules.push(PolicyRule {
                        selector,
                        direction,
                        mode,
                        retention_days,
                    });
                }
                other => {
                    return Err(mal(&format!("unknown keyword {other}")));
                }
            }
        }
        Ok(EulaPolicy {
            policy_id: policy_id.ok_or(Error::MalformedPolicy {
                line: 0,
                reason: "missing policy line".to_string(),
            })?,
            version: version.ok_or(Error::MalformedPolicy {
                line: 0,
                reason: "missing version line".to_string(),
            })?,
            rules,
        })
    }

    /// Same policy content under a different version number.
    pub fn with_version(&self, version: u64) -> EulaPolicy {
        EulaPolicy {
            version,
            ..self.clone()
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<ShareMode, String> {
    match s.split_once(':') {
        None => match s {
            "deny" => Ok(ShareMode::Deny),
            "full" => Ok(ShareMode::Full),
            "downsample" | "summarize" => Err(format!("mode {s} requires parameters")),
            other => Err(format!("unknown mode {other}")),
        },
        Some(("downsample", params)) => {
            let interval_ms: i64 = params
                .parse()
                .map_err(|_| "downsample interval must be an integer".to_string())?;
            if interval_ms <= 0 {
                return Err("downsample interval must be positive".to_string());
            }
            Ok(ShareMode::Downsample { interval_ms })
        }
        Some(("summarize", params)) => {
            let (agg, window) = params
                .split_once(',')
                .ok_or_else(|| "expected summarize:<agg>,<window_ms>".to_string())?;
            let agg = Aggregate::parse(agg).map_err(|e| e.to_string())?;
            let window_ms: i64 = window
                .parse()
                .map_err(|_| "summarize window must be an integer".to_string())?;
            if window_ms <= 0 {
                return Err("summarize window must be positive".to_string());
            }
            Ok(ShareMode::Summarize { agg, window_ms })
        }
        Some((other, _)) => Err(format!("unknown mode {other}")),
    }
}

// ---------------------------------------------------------------------------
// Policy library

pub const DENY_ALL: &str = "\
policy deny-all
version 1
rule * both deny
";

pub const SHARE_FULL: &str = "\
policy share-full
version 1
rule * both full
";

pub const SHARE_SUMMARIZED_HOURLY: &str = "\
policy share-summarized-hourly
version 1
rule * outbound summarize:mean,3600000 retention=30
rule * inbound full
";

pub const SHARE_DOWNSAMPLED_1MIN: &str = "\
policy share-downsampled-1min
version 1
rule * outbound downsample:60000 retention=7
rule * inbound full
";

/// The shipped policy documents an owner can pick from.
pub fn library() -> Vec<EulaPolicy> {
    [DENY_ALL, SHARE_FULL, SHARE_SUMMARIZED_HOURLY, SHARE_DOWNSAMPLED_1MIN]
        .iter()
        .map(|t| EulaPolicy::parse(t).expect("library policy parses"))
        .collect()
}

pub fn library_policy(name: &str) -> Option<EulaPolicy> {
    library().into_iter().find(|p| p.policy_id == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn authenticate_and_token_uniqueness() {
        let mut reg = PrincipalRegistry::default();
        reg.register(PrincipalId::from("utilA"), PrincipalKind::Owner, "tok-1")
            .unwrap();
        assert_eq!(
            reg.authenticate("tok-1").unwrap().id,
            PrincipalId::from("utilA")
        );
        assert_eq!(reg.authenticate("nope").unwrap_err(), Error::UnknownToken);
        // Second token for the same principal is explicit and fine.
        reg.register(PrincipalId::from("utilA"), PrincipalKind::Owner, "tok-2")
            .unwrap();
        assert_eq!(
            reg.authenticate("tok-2").unwrap().id,
            PrincipalId::from("utilA")
        );
        // Reusing a token is not.
        assert_eq!(
            reg.register(PrincipalId::from("other"), PrincipalKind::App, "tok-1")
                .unwrap_err(),
            Error::DuplicateToken
        );
    }

    #[test]
    fn default_deny_and_admin_implication() {
        let mut grants = GrantTable::default();
        let p = PrincipalId::from("app-1");
        let store = StoreId::from("readings");
        assert!(!grants.allowed(&p, Some(&store), Action::Read));

        grants.add(Grant {
            principal: p.clone(),
            selector: StoreSelector::One(store.clone()),
            rights: Rights::of(&[Action::Read, Action::Subscribe]),
        });
        assert!(grants.allowed(&p, Some(&store), Action::Read));
        assert!(grants.allowed(&p, Some(&store), Action::Subscribe));
        assert!(!grants.allowed(&p, Some(&store), Action::Write));
        // Store-scoped grant does not reach microdatabase scope.
        assert!(!grants.allowed(&p, None, Action::Read));

        let admin = PrincipalId::from("owner");
        grants.add(Grant {
            principal: admin.clone(),
            selector: StoreSelector::All,
            rights: Rights::ADMIN,
        });
        for action in [Action::Read, Action::Write, Action::Subscribe, Action::Admin] {
            assert!(grants.allowed(&admin, Some(&store), action));
            assert!(grants.allowed(&admin, None, action));
        }
        // ALL selector covers stores created later.
        assert!(grants.allowed(&admin, Some(&StoreId::from("later")), Action::Write));
    }

    #[test]
    fn grants_are_monotone_and_revocable() {
        let mut grants = GrantTable::default();
        let p = PrincipalId::from("app-1");
        let store = StoreId::from("s");
        grants.add(Grant {
            principal: p.clone(),
            selector: StoreSelector::One(store.clone()),
            rights: Rights::of(&[Action::Read]),
        });
        // Adding another grant never removes rights.
        grants.add(Grant {
            principal: p.clone(),
            selector: StoreSelector::One(store.clone()),
            rights: Rights::of(&[Action::Write]),
        });
        assert!(grants.allowed(&p, Some(&store), Action::Read));
        assert!(grants.allowed(&p, Some(&store), Action::Write));

        grants.revoke(&p, &StoreSelector::One(store.clone()), Rights::of(&[Action::Write]));
        assert!(grants.allowed(&p, Some(&store), Action::Read));
        assert!(!grants.allowed(&p, Some(&store), Action::Write));
    }

    /// Oracle check: the indexed table equals brute-force evaluation over
    /// the flat grant list, across randomized grant sets and queries.
    #[test]
    fn authorize_matches_grant_scan_oracle() {
        let mut state = 1234u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let principals: Vec<PrincipalId> =
            (0..5).map(|i| PrincipalId::from(format!("p{i}").as_str())).collect();
        let stores: Vec<StoreId> =
            (0..4).map(|i| StoreId::from(format!("s{i}").as_str())).collect();
        let actions = [Action::Read, Action::Write, Action::Subscribe, Action::Admin];

        for _case in 0..50 {
            let mut table = GrantTable::default();
            let mut flat: Vec<Grant> = Vec::new();
            for _ in 0..(next() % 12) {
                let g = Grant {
                    principal: principals[(next() % 5) as usize].clone(),
                    selector: if next() % 4 == 0 {
                        StoreSelector::All
                    } else {
                        StoreSelector::One(stores[(next() % 4) as usize].clone())
                    },
                    rights: Rights {
                        read: next() % 2 == 0,
                        write: next() % 2 == 0,
                        subscribe: next() % 2 == 0,
                        admin: next() % 5 == 0,
                    },
                };
                table.add(g.clone());
                flat.push(g);
            }
            for p in &principals {
                for store in stores.iter().map(Some).chain([None]) {
                    for &action in &actions {
                        let got = table.allowed(p, store, action);
                        // Oracle: scan the flat list with independently
                        // restated semantics.
                        let want = flat.iter().any(|g| {
                            let scope_ok = match (&g.selector, store) {
                                (StoreSelector::All, _) => true,
                                (StoreSelector::One(s), Some(t)) => s == t,
                                (StoreSelector::One(_), None) => false,
                            };
                            let right_ok = match action {
                                Action::Read => g.rights.read || g.rights.admin,
                                Action::Write => g.rights.write || g.rights.admin,
                                Action::Subscribe => g.rights.subscribe || g.rights.admin,
                                Action::Admin => g.rights.admin,
                            };
                            g.principal == *p && scope_ok && right_ok
                        });
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn first_match_wins_and_implicit_deny() {
        let p = EulaPolicy::parse(
            "policy t\nversion 1\nrule health* outbound summarize:mean,3600000\nrule * outbound full\n",
        )
        .unwrap();
        let health = p.rule_for(&StoreId::from("health"), Flow::Outbound);
        assert!(matches!(health.mode, ShareMode::Summarize { .. }));
        let readings = p.rule_for(&StoreId::from("readings"), Flow::Outbound);
        assert_eq!(readings.mode, ShareMode::Full);
        // No inbound rule at all: implicit deny.
        let inbound = p.rule_for(&StoreId::from("readings"), Flow::Inbound);
        assert_eq!(inbound.mode, ShareMode::Deny);
    }

    #[test]
    fn rule_order_is_significant() {
        let specific_first = EulaPolicy::parse(
            "policy a\nversion 1\nrule health outbound deny\nrule * outbound full\n",
        )
        .unwrap();
        let general_first = EulaPolicy::parse(
            "policy b\nversion 1\nrule * outbound full\nrule health outbound deny\n",
        )
        .unwrap();
        let store = StoreId::from("health");
        assert_eq!(
            specific_first.rule_for(&store, Flow::Outbound).mode,
            ShareMode::Deny
        );
        assert_eq!(
            general_first.rule_for(&store, Flow::Outbound).mode,
            ShareMode::Full
        );
    }

    #[test]
    fn canonical_round_trip_with_noise() {
        let noisy = "# consent for fleet sharing\n\nPolicy   share-custom\nVERSION 3\n  RULE  health*   Outbound   SUMMARIZE:mean,3600000   retention=30\nrule * BOTH deny  # terminal\n";
        let parsed = EulaPolicy::parse(noisy).unwrap();
        let canon = parsed.canonical_text();
        assert_eq!(
            canon,
            "policy share-custom\nversion 3\nrule health* outbound summarize:mean,3600000 retention=30\nrule * both deny\n"
        );
        // Canonical form re-parses to the same policy, byte-identically.
        let reparsed = EulaPolicy::parse(&canon).unwrap();
        assert_eq!(reparsed, parsed);
        assert_eq!(reparsed.canonical_text(), canon);
    }

    #[test]
    fn malformed_policies_carry_line_numbers() {
        let cases = [
            ("policy p\nversion 1\nrule * sideways full\n", 3),
            ("policy p\nversion 1\nrule * outbound warp\n", 3),
            ("policy p\nversion one\n", 2),
            ("policy p\nversion 1\nrule * outbound downsample:0\n", 3),
            ("policy p\nversion 1\nrule * outbound summarize:median,10\n", 3),
            ("policy p\nversion 1\nbogus line here\n", 3),
            ("policy p\nversion 1\nrule * outbound full retention=soon\n", 3),
        ];
        for (text, want_line) in cases {
            match EulaPolicy::parse(text).unwrap_err() {
                Error::MalformedPolicy { line, .. } => {
                    assert_eq!(line, want_line, "for {text:?}")
                }
                other => panic!("expected MalformedPolicy, got {other:?}"),
            }
        }
        // Missing headers.
        assert!(matches!(
            EulaPolicy::parse("version 1\n").unwrap_err(),
            Error::MalformedPolicy { line: 0, .. }
        ));
    }

    #[test]
    fn library_parses_and_round_trips() {
        let lib = library();
        assert_eq!(lib.len(), 4);
        let names: Vec<&str> = lib.iter().map(|p| p.policy_id.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "deny-all",
                "share-full",
                "share-summarized-hourly",
                "share-downsampled-1min"
            ]
        );
        for (text, policy) in [
            DENY_ALL,
            SHARE_FULL,
            SHARE_SUMMARIZED_HOURLY,
            SHARE_DOWNSAMPLED_1MIN,
        ]
        .iter()
        .zip(&lib)
        {
            assert_eq!(&policy.canonical_text(), text);
        }
        assert!(library_policy("share-full").is_some());
        assert!(library_policy("nope").is_none());
    }

    #[test]
    fn effective_retention_is_most_restrictive() {
        let p = EulaPolicy::parse(
            "policy p\nversion 1\nrule * outbound full retention=30\nrule * inbound full retention=7\n",
        )
        .unwrap();
        assert_eq!(p.effective_retention_days(&StoreId::from("s")), Some(7));
        let unlimited = EulaPolicy::parse("policy p\nversion 1\nrule * both full\n").unwrap();
        assert_eq!(unlimited.effective_retention_days(&StoreId::from("s")), None);
    }

    #[test]
    fn derive_store_rules_covers_both_directions() {
        let p = library_policy("share-summarized-hourly").unwrap();
        let stores = vec![StoreId::from("health"), StoreId::from("work")];
        let derived = p.derive_store_rules(&stores);
        for s in &stores {
            assert!(matches!(
                derived[s].outbound.mode,
                ShareMode::Summarize { agg: Aggregate::Mean, window_ms: 3_600_000 }
            ));
            assert_eq!(derived[s].inbound.mode, ShareMode::Full);
        }
    }
}
