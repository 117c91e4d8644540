//! The microdatabase: an owned bundle of stores, an information model,
//! grants, a sharing policy, and a change-event queue.
//!
//! Every mutating entry point authenticates against the grant table
//! (default deny) before touching a store; platform internals (work
//! transitions, replication apply) enter through dedicated paths instead.
//! Local writes tick `write_clock`, the per-replica counter other
//! replicas track to dedup transfers; both local and replicated changes
//! are appended to the mutation log so they keep flowing down chains of
//! links.

use crate::error::{Error, Result};
use crate::events::{Event, EventOp};
use crate::ids::{EventId, MdbId, PrincipalId, ReplicaId, StoreId, TierId};
use crate::model::{AssetInstance, AssetType, DiscoverQuery, DiscoveredBinding, InfoModel};
use crate::policy::{Action, EulaPolicy, Grant, GrantTable, StoreSelector};
use crate::record::Record;
use crate::store::{ApplyOutcome, ColumnStore, MutationLog, StoreKind};
use crate::value::Value;
use crate::work::WorkRequest;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub struct Microdatabase {
    pub id: MdbId,
    pub tier: TierId,
    pub name: String,
    pub owner: PrincipalId,
    replica: ReplicaId,
    stores: BTreeMap<StoreId, ColumnStore>,
    pub model: InfoModel,
    grants: GrantTable,
    policy: EulaPolicy,
    /// Pending events, drained by the runtime pump.
    queue: VecDeque<Event>,
    next_event_id: EventId,
    /// This replica's write counter; ticks on every local mutation.
    write_clock: u64,
    pub log: MutationLog,
}

impl Microdatabase {
    /// A new microdatabase starts with the deny-all policy and a single
    /// admin grant for its owner covering all stores, present and future.
    pub fn new(tier: &TierId, name: &str, owner: PrincipalId) -> Microdatabase {
        let id = MdbId::compose(tier, name);
        let replica = id.replica();
        let mut grants = GrantTable::default();
        grants.add(Grant {
            principal: owner.clone(),
            selector: StoreSelector::All,
            rights: crate::policy::Rights::ADMIN,
        });
        Microdatabase {
            id,
            tier: tier.clone(),
            name: name.to_string(),
            owner,
            replica,
            stores: BTreeMap::new(),
            model: InfoModel::default(),
            grants,
            policy: crate::policy::library_policy("deny-all").expect("library has deny-all"),
            queue: VecDeque::new(),
            next_event_id: 1,
            write_clock: 0,
            log: MutationLog::new(),
        }
    }

    pub fn replica(&self) -> &ReplicaId {
        &self.replica
    }

    /// Next origin-clock tick for a local mutation.
    pub fn next_clock(&mut self) -> u64 {
        self.write_clock += 1;
        self.write_clock
    }

    pub fn write_clock(&self) -> u64 {
        self.write_clock
    }

    // -- authorization ----------------------------------------------------

    /// Grant check; `store = None` is the microdatabase scope, which only
    /// all-store grants can satisfy.
    pub fn check(
        &self,
        principal: &PrincipalId,
        store: Option<&StoreId>,
        action: Action,
    ) -> Result<()> {
        if self.grants.allowed(principal, store, action) {
            Ok(())
        } else {
            Err(Error::Unauthorized {
                principal: principal.to_string(),
                action: action.name().to_string(),
                scope: match store {
                    Some(s) => format!("{}:{}", self.id, s),
                    None => self.id.to_string(),
                },
            })
        }
    }

    pub fn add_grant(&mut self, actor: &PrincipalId, grant: Grant) -> Result<()> {
        self.check(actor, None, Action::Admin)?;
        self.grants.add(grant);
        Ok(())
    }

    pub fn revoke_grant(
        &mut self,
        actor: &PrincipalId,
        principal: &PrincipalId,
        selector: &StoreSelector,
        rights: crate::policy::Rights,
    ) -> Result<()> {
        self.check(actor, None, Action::Admin)?;
        self.grants.revoke(principal, selector, rights);
        Ok(())
    }

    pub fn grants(&self) -> &GrantTable {
        &self.grants
    }

    // -- policy -----------------------------------------------------------

    pub fn policy(&self) -> &EulaPolicy {
        &self.policy
    }

    /// Replace the sharing policy. The version must strictly increase so
    /// concurrent pushes of older consent text cannot roll it back.
    pub fn set_policy(&mut self, actor: &PrincipalId, policy: EulaPolicy) -> Result<()> {
        self.check(actor, None, Action::Admin)?;
        if policy.version <= self.policy.version {
            return Err(Error::StalePolicyVersion {
                current: self.policy.version,
                offered: policy.version,
            });
        }
        self.policy = policy;
        Ok(())
    }

    // -- stores -----------------------------------------------------------

    pub fn create_store(
        &mut self,
        actor: &PrincipalId,
        store_id: StoreId,
        kind: StoreKind,
    ) -> Result<()> {
        self.check(actor, None, Action::Admin)?;
        if self.stores.contains_key(&store_id) {
            return Err(Error::DuplicateStore(store_id.to_string()));
        }
        self.stores
            .insert(store_id.clone(), ColumnStore::new(store_id, kind));
        Ok(())
    }

    pub fn store(&self, id: &StoreId) -> Result<&ColumnStore> {
        self.stores
            .get(id)
            .ok_or_else(|| Error::UnknownStore(id.to_string()))
    }

    pub(crate) fn store_mut(&mut self, id: &StoreId) -> Result<&mut ColumnStore> {
        self.stores
            .get_mut(id)
            .ok_or_else(|| Error::UnknownStore(id.to_string()))
    }

    pub fn has_store(&self, id: &StoreId) -> bool {
        self.stores.contains_key(id)
    }

    pub fn store_ids(&self) -> Vec<StoreId> {
        self.stores.keys().cloned().collect()
    }

    pub fn stores(&self) -> impl Iterator<Item = &ColumnStore> {
        self.stores.values()
    }

    // -- data plane -------------------------------------------------------

    pub fn put(
        &mut self,
        principal: &PrincipalId,
        store_id: &StoreId,
        key: &str,
        ts: i64,
        value: Value,
    ) -> Result<Record> {
        self.check(principal, Some(store_id), Action::Write)?;
        self.write_record(store_id, key, ts, value)
    }

    /// Platform-internal write: work-status transitions and other runtime
    /// bookkeeping that the store model itself initiates.
    pub fn platform_put(
        &mut self,
        store_id: &StoreId,
        key: &str,
        ts: i64,
        value: Value,
    ) -> Result<Record> {
        self.write_record(store_id, key, ts, value)
    }

    fn write_record(
        &mut self,
        store_id: &StoreId,
        key: &str,
        ts: i64,
        value: Value,
    ) -> Result<Record> {
        value.validate()?;
        self.validate_for_kind(store_id, key, ts, &value)?;
        let clock = self.next_clock();
        let replica = self.replica.clone();
        let store = self.store_mut(store_id)?;
        let existed = store.get_any(key, ts).is_some();
        let rec = store.put_local(key, ts, Some(value), &replica, clock);
        self.log.append(store_id, &rec);
        let op = if existed { EventOp::Updated } else { EventOp::Created };
        self.emit(store_id, op, key, ts, rec.revision);
        Ok(rec)
    }

    /// Values in a `work` store must be JSON work requests whose id and
    /// submission time agree with the record identity.
    fn validate_for_kind(
        &self,
        store_id: &StoreId,
        key: &str,
        ts: i64,
        value: &Value,
    ) -> Result<()> {
        let store = self.store(store_id)?;
        if store.kind == StoreKind::Work {
            let req = WorkRequest::decode(value)
                .map_err(|e| Error::KindMismatch(format!("work store {store_id}: {e}")))?;
            if req.request_id.as_str() != key {
                return Err(Error::KindMismatch(format!(
                    "work store {store_id}: key {key} does not match request id {}",
                    req.request_id
                )));
            }
            if req.submitted_ts != ts {
                return Err(Error::KindMismatch(format!(
                    "work store {store_id}: ts {ts} does not match submission time {}",
                    req.submitted_ts
                )));
            }
        }
        Ok(())
    }

    pub fn delete(
        &mut self,
        principal: &PrincipalId,
        store_id: &StoreId,
        key: &str,
        ts: i64,
    ) -> Result<Record> {
        self.check(principal, Some(store_id), Action::Write)?;
        let clock = self.next_clock();
        let replica = self.replica.clone();
        let store = self.store_mut(store_id)?;
        if store.get_live(key, ts).is_none() {
            // Re-deleting a tombstone is also NotFound; the clock tick is
            // harmless because nothing was stamped with it.
            return Err(Error::NotFound {
                store: store_id.to_string(),
                key: key.to_string(),
                ts,
            });
        }
        let rec = store.put_local(key, ts, None, &replica, clock);
        self.log.append(store_id, &rec);
        self.emit(store_id, EventOp::Deleted, key, ts, rec.revision);
        Ok(rec)
    }

    pub fn get(
        &self,
        principal: &PrincipalId,
        store_id: &StoreId,
        key: &str,
        ts: i64,
    ) -> Result<&Record> {
        self.check(principal, Some(store_id), Action::Read)?;
        self.store(store_id)?
            .get_live(key, ts)
            .ok_or_else(|| Error::NotFound {
                store: store_id.to_string(),
                key: key.to_string(),
                ts,
            })
    }

    pub fn range(
        &self,
        principal: &PrincipalId,
        store_id: &StoreId,
        key_glob: &str,
        t0: i64,
        t1: i64,
    ) -> Result<Vec<&Record>> {
        self.check(principal, Some(store_id), Action::Read)?;
        self.store(store_id)?.range(key_glob, t0, t1)
    }

    /// Latest live record per key at or before `as_of`, under a read grant.
    pub fn latest_per_key(
        &self,
        principal: &PrincipalId,
        store_id: &StoreId,
        key_glob: &str,
        as_of: i64,
    ) -> Result<Vec<&Record>> {
        self.check(principal, Some(store_id), Action::Read)?;
        Ok(self.store(store_id)?.latest_per_key(key_glob, as_of))
    }

    /// Replication apply. Emits a `Replicated` event and logs the record
    /// only when the merge takes it; losing and identical arrivals still
    /// advance knowledge inside the store.
    pub fn apply_replicated(&mut self, store_id: &StoreId, incoming: &Record) -> Result<ApplyOutcome> {
        let outcome = self.store_mut(store_id)?.apply_replicated(incoming);
        if outcome.decision.applies() {
            self.log.append(store_id, incoming);
            self.emit(store_id, EventOp::Replicated, &incoming.key, incoming.ts, incoming.revision);
        }
        Ok(outcome)
    }

    // -- information model ------------------------------------------------

    pub fn define_type(&mut self, actor: &PrincipalId, ty: AssetType) -> Result<()> {
        self.check(actor, None, Action::Write)?;
        self.model.define_type(ty)
    }

    pub fn register_instance(&mut self, actor: &PrincipalId, instance: AssetInstance) -> Result<()> {
        self.check(actor, None, Action::Write)?;
        let stores = &self.stores;
        self.model
            .register_instance(instance, |sid| stores.contains_key(sid))
    }

    pub fn discover(
        &self,
        actor: &PrincipalId,
        query: &DiscoverQuery,
    ) -> Result<Vec<DiscoveredBinding>> {
        self.check(actor, None, Action::Read)?;
        Ok(self.model.discover(query))
    }

    pub fn search(&self, actor: &PrincipalId, text: &str) -> Result<Vec<&AssetInstance>> {
        self.check(actor, None, Action::Read)?;
        Ok(self.model.search(text))
    }

    // -- events -----------------------------------------------------------

    fn emit(&mut self, store_id: &StoreId, op: EventOp, key: &str, ts: i64, revision: u64) {
        let event = Event {
            event_id: self.next_event_id,
            mdb_id: self.id.clone(),
            store_id: store_id.clone(),
            op,
            key: key.to_string(),
            ts,
            revision,
        };
        self.next_event_id += 1;
        self.queue.push_back(event);
    }

    pub fn pop_event(&mut self) -> Option<Event> {
        self.queue.pop_front()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    // -- retention --------------------------------------------------------

    /// Purge records older than each store's policy horizon. Returns what
    /// was dropped. Knowledge is untouched, so purged versions cannot be
    /// resurrected by a later sync.
    pub fn purge_expired(&mut self, now_ms: i64) -> Vec<(StoreId, String, i64)> {
        const DAY_MS: i64 = 86_400_000;
        let mut dropped = Vec::new();
        let store_ids: Vec<StoreId> = self.stores.keys().cloned().collect();
        for sid in store_ids {
            let Some(days) = self.policy.effective_retention_days(&sid) else {
                continue;
            };
            let horizon = now_ms.saturating_sub(days as i64 * DAY_MS);
            let store = self.stores.get_mut(&sid).expect("store listed");
            for (key, ts) in store.purge_older_than(horizon) {
                dropped.push((sid.clone(), key, ts));
            }
        }
        if !dropped.is_empty() {
            let set: BTreeSet<(StoreId, String, i64)> = dropped.iter().cloned().collect();
            self.log.compact_purged(&set);
        }
        dropped
    }

    /// Canonical text of all store contents, for snapshots and
    /// state-equality checks.
    pub fn canonical_state(&self) -> String {
        let mut out = String::new();
        for store in self.stores.values() {
            out.push_str(&store.canonical_state());
        }
        out
    }
}
