//! The simulation runtime: tiers of microdatabases, links between them,
//! and the cycle loop that pumps events, syncs links, purges expired
//! records, and moves work requests.
//!
//! Everything is single threaded and deterministic: maps are ordered,
//! queues drain in id order, and link syncs run in link-id order. Running
//! the same scenario twice yields byte-identical state and reports.

use crate::alias::AliasRegister;
use crate::appstore::{
    parse_app_payload, parse_service_payload, parse_template_payload, AppSpec, AppSpecAction,
    AppSpecRule, Catalog, CatalogEntry, ManifestKind, ProvenanceRecord, ServiceSpec,
    ServiceSpecInput,
};
use crate::audit::{AuditEvent, AuditLog};
use crate::error::{Error, Result};
use crate::events::{DeliveryFailure, Event, HandlerRef, Subscription};
use crate::framework::{
    resolve_related_slot, resolve_store_slot, substitute_pattern, AppAction, AppInstance, AppRule,
    ComputeRegistry, InputBinding, OutputBinding, ProviderFactory, ProviderFactoryRegistry,
    RelatedDataSource, RelatedQuery, ResolvedInputs, ServiceCompute, ServiceInstance, SlotBinding,
    SlotShape,
};
use crate::ids::{
    AppId, CanonicalId, LinkId, MdbId, PrincipalId, ProviderId, ServiceId, StoreId,
    SubscriptionId, TierId,
};
use crate::mdb::Microdatabase;
use crate::policy::{Action, EulaPolicy, Grant, PrincipalKind, PrincipalRegistry, Rights, StoreSelector};
use crate::record::Record;
use crate::replication::{
    apply_direction, decode_batch, encode_batch, plan_direction, stamp_synthesis, DirectionReport,
    FilterCriteria, ReplicaLink,
};
use crate::store::StoreKind;
use crate::value::Value;
use crate::version::{check_version, Version};
use crate::work::{WorkRequest, WorkStatus};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Tiers

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TierLevel {
    Device,
    Plant,
    Local,
    Regional,
    Global,
}

impl TierLevel {
    pub fn rank(&self) -> u8 {
        match self {
            TierLevel::Device => 0,
            TierLevel::Plant => 1,
            TierLevel::Local => 2,
            TierLevel::Regional => 3,
            TierLevel::Global => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TierLevel::Device => "device",
            TierLevel::Plant => "plant",
            TierLevel::Local => "local",
            TierLevel::Regional => "regional",
            TierLevel::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<TierLevel> {
        match s {
            "device" => Ok(TierLevel::Device),
            "plant" => Ok(TierLevel::Plant),
            "local" => Ok(TierLevel::Local),
            "regional" => Ok(TierLevel::Regional),
            "global" => Ok(TierLevel::Global),
            other => Err(Error::InvalidValue(format!("unknown tier level {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkState {
    Up,
    Down,
}

pub struct Tier {
    pub id: TierId,
    pub level: TierLevel,
    pub owner: PrincipalId,
    pub platform_version: Version,
    pub mdb_names: BTreeSet<String>,
    pub aliases: AliasRegister,
    pub services: BTreeMap<ServiceId, ServiceInstance>,
    pub apps: BTreeMap<AppId, AppInstance>,
    pub providers: BTreeMap<ProviderId, Box<dyn RelatedDataSource>>,
    pub config_store: Option<(MdbId, StoreId)>,
    next_ordinal: BTreeMap<String, u64>,
}

impl Tier {
    fn next_ordinal(&mut self, name: &str) -> u64 {
        let n = self.next_ordinal.entry(name.to_string()).or_insert(0);
        *n += 1;
        *n
    }
}

pub type EventCallback =
    Arc<dyn Fn(&mut Simulation, &Event) -> std::result::Result<(), String> + Send + Sync>;

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PumpReport {
    pub delivered: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub link_id: LinkId,
    pub forward: DirectionReport,
    pub reverse: DirectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCycleEntry {
    pub link_id: LinkId,
    pub skipped: Option<String>,
    pub forward_transferred: usize,
    pub reverse_transferred: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u64,
    pub clock_ms: i64,
    pub events_delivered: usize,
    pub deliveries_failed: usize,
    pub links: Vec<LinkCycleEntry>,
    pub purged: usize,
    pub work_transitions: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub tier: TierId,
    pub tag: String,
    pub rules_fired: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorkIndexEntry {
    request_id: String,
    mdb: MdbId,
    store: StoreId,
    submitted_cycle: u64,
}

// ---------------------------------------------------------------------------
// Simulation

pub struct Simulation {
    pub clock_ms: i64,
    pub cycle: u64,
    tiers: BTreeMap<TierId, Tier>,
    mdbs: BTreeMap<MdbId, Microdatabase>,
    adjacency: BTreeMap<(TierId, TierId), LinkState>,
    links: BTreeMap<LinkId, ReplicaLink>,
    principals: PrincipalRegistry,
    subscriptions: BTreeMap<SubscriptionId, Subscription>,
    next_sub_id: SubscriptionId,
    callbacks: BTreeMap<(TierId, String), EventCallback>,
    pub delivery_failures: Vec<DeliveryFailure>,
    pub catalog: Catalog,
    computes: ComputeRegistry,
    provider_factories: ProviderFactoryRegistry,
    pub audit: AuditLog,
    work_index: VecDeque<WorkIndexEntry>,
    next_work_ordinal: u64,
    pub work_expiry_cycles: u64,
    pub pump_budget: usize,
    /// One-shot test hook: the next link sync stops applying after this
    /// many records in its forward direction.
    pub sync_interrupt_after: Option<usize>,
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation::new()
    }
}

impl Simulation {
    pub fn new() -> Simulation {
        Simulation {
            clock_ms: 0,
            cycle: 0,
            tiers: BTreeMap::new(),
            mdbs: BTreeMap::new(),
            adjacency: BTreeMap::new(),
            links: BTreeMap::new(),
            principals: PrincipalRegistry::default(),
            subscriptions: BTreeMap::new(),
            next_sub_id: 1,
            callbacks: BTreeMap::new(),
            delivery_failures: Vec::new(),
            catalog: Catalog::default(),
            computes: ComputeRegistry::default(),
            provider_factories: ProviderFactoryRegistry::default(),
            audit: AuditLog::default(),
            work_index: VecDeque::new(),
            next_work_ordinal: 0,
            work_expiry_cycles: 8,
            pump_budget: 10_000,
            sync_interrupt_after: None,
        }
    }

    pub fn advance_clock(&mut self, ms: i64) {
        self.clock_ms += ms;
    }

    // -- principals -------------------------------------------------------

    pub fn register_principal(
        &mut self,
        id: PrincipalId,
        kind: PrincipalKind,
        token: &str,
    ) -> Result<()> {
        self.principals.register(id, kind, token)
    }

    pub fn authenticate(&self, token: &str) -> Result<PrincipalId> {
        Ok(self.principals.authenticate(token)?.id.clone())
    }

    pub fn principal_exists(&self, id: &PrincipalId) -> bool {
        self.principals.exists(id)
    }

    // -- topology ---------------------------------------------------------

    pub fn create_tier(
        &mut self,
        id: TierId,
        level: TierLevel,
        owner: PrincipalId,
        platform_version: Version,
    ) -> Result<()> {
        if self.tiers.contains_key(&id) {
            return Err(Error::DuplicateTier(id.to_string()));
        }
        self.principals.get(&owner)?;
        self.tiers.insert(
            id.clone(),
            Tier {
                id,
                level,
                owner,
                platform_version,
                mdb_names: BTreeSet::new(),
                aliases: AliasRegister::default(),
                services: BTreeMap::new(),
                apps: BTreeMap::new(),
                providers: BTreeMap::new(),
                config_store: None,
                next_ordinal: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn tier(&self, id: &TierId) -> Result<&Tier> {
        self.tiers.get(id).ok_or_else(|| Error::UnknownTier(id.to_string()))
    }

    fn tier_mut(&mut self, id: &TierId) -> Result<&mut Tier> {
        self.tiers
            .get_mut(id)
            .ok_or_else(|| Error::UnknownTier(id.to_string()))
    }

    pub fn tier_ids(&self) -> Vec<TierId> {
        self.tiers.keys().cloned().collect()
    }

    fn adjacency_key(a: &TierId, b: &TierId) -> (TierId, TierId) {
        if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    }

    /// Declare two tiers adjacent. Only tiers one level apart can link;
    /// the chain is the topology.
    pub fn declare_adjacent(&mut self, a: &TierId, b: &TierId) -> Result<()> {
        let la = self.tier(a)?.level;
        let lb = self.tier(b)?.level;
        if la.rank().abs_diff(lb.rank()) != 1 {
            return Err(Error::NonAdjacentTiers(a.to_string(), b.to_string()));
        }
        self.adjacency
            .insert(Self::adjacency_key(a, b), LinkState::Up);
        Ok(())
    }

    pub fn set_link_state(&mut self, a: &TierId, b: &TierId, state: LinkState) -> Result<()> {
        let key = Self::adjacency_key(a, b);
        match self.adjacency.get_mut(&key) {
            Some(s) => {
                *s = state;
                Ok(())
            }
            None => Err(Error::NonAdjacentTiers(a.to_string(), b.to_string())),
        }
    }

    pub fn link_state(&self, a: &TierId, b: &TierId) -> Result<LinkState> {
        self.adjacency
            .get(&Self::adjacency_key(a, b))
            .copied()
            .ok_or_else(|| Error::NonAdjacentTiers(a.to_string(), b.to_string()))
    }

    // -- microdatabases ---------------------------------------------------

    pub fn create_mdb(&mut self, principal: &PrincipalId, tier: &TierId, name: &str) -> Result<MdbId> {
        let t = self.tier(tier)?;
        if t.owner != *principal {
            return Err(Error::Unauthorized {
                principal: principal.to_string(),
                action: "create_mdb".to_string(),
                scope: tier.to_string(),
            });
        }
        if t.mdb_names.contains(name) {
            return Err(Error::DuplicateMdbName {
                tier: tier.to_string(),
                name: name.to_string(),
            });
        }
        let mdb = Microdatabase::new(tier, name, principal.clone());
        let id = mdb.id.clone();
        self.mdbs.insert(id.clone(), mdb);
        self.tier_mut(tier)?.mdb_names.insert(name.to_string());
        Ok(id)
    }

    pub fn mdb(&self, id: &MdbId) -> Result<&Microdatabase> {
        self.mdbs.get(id).ok_or_else(|| Error::UnknownMdb(id.to_string()))
    }

    pub fn mdb_mut(&mut self, id: &MdbId) -> Result<&mut Microdatabase> {
        self.mdbs
            .get_mut(id)
            .ok_or_else(|| Error::UnknownMdb(id.to_string()))
    }

    pub fn mdb_ids(&self) -> Vec<MdbId> {
        self.mdbs.keys().cloned().collect()
    }

    // -- data plane passthroughs -----------------------------------------

    pub fn create_store(
        &mut self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: StoreId,
        kind: StoreKind,
    ) -> Result<()> {
        self.mdb_mut(mdb)?.create_store(principal, store, kind)
    }

    pub fn put(
        &mut self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: &StoreId,
        key: &str,
        ts: i64,
        value: Value,
    ) -> Result<Record> {
        self.mdb_mut(mdb)?.put(principal, store, key, ts, value)
    }

    pub fn get(
        &self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: &StoreId,
        key: &str,
        ts: i64,
    ) -> Result<Record> {
        Ok(self.mdb(mdb)?.get(principal, store, key, ts)?.clone())
    }

    pub fn delete(
        &mut self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: &StoreId,
        key: &str,
        ts: i64,
    ) -> Result<Record> {
        self.mdb_mut(mdb)?.delete(principal, store, key, ts)
    }

    pub fn range(
        &self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: &StoreId,
        key_glob: &str,
        t0: i64,
        t1: i64,
    ) -> Result<Vec<Record>> {
        Ok(self
            .mdb(mdb)?
            .range(principal, store, key_glob, t0, t1)?
            .into_iter()
            .cloned()
            .collect())
    }

    pub fn set_policy_text(
        &mut self,
        principal: &PrincipalId,
        mdb: &MdbId,
        text: &str,
    ) -> Result<()> {
        let policy = EulaPolicy::parse(text)?;
        self.mdb_mut(mdb)?.set_policy(principal, policy)
    }

    pub fn set_policy(
        &mut self,
        principal: &PrincipalId,
        mdb: &MdbId,
        policy: EulaPolicy,
    ) -> Result<()> {
        self.mdb_mut(mdb)?.set_policy(principal, policy)
    }

    pub fn add_grant(&mut self, actor: &PrincipalId, mdb: &MdbId, grant: Grant) -> Result<()> {
        self.principals.get(&grant.principal)?;
        self.mdb_mut(mdb)?.add_grant(actor, grant)
    }

    pub fn revoke_grant(
        &mut self,
        actor: &PrincipalId,
        mdb: &MdbId,
        principal: &PrincipalId,
        selector: &StoreSelector,
        rights: Rights,
    ) -> Result<()> {
        self.mdb_mut(mdb)?.revoke_grant(actor, principal, selector, rights)
    }

    // -- interoperability register ---------------------------------------

    pub fn register_alias(
        &mut self,
        principal: &PrincipalId,
        tier: &TierId,
        scheme: &str,
        value: &str,
        canonical: CanonicalId,
    ) -> Result<()> {
        let t = self.tier(tier)?;
        if t.owner != *principal {
            return Err(Error::Unauthorized {
                principal: principal.to_string(),
                action: "register_alias".to_string(),
                scope: tier.to_string(),
            });
        }
        self.tier_mut(tier)?.aliases.register(scheme, value, canonical)
    }

    pub fn resolve_alias(&self, tier: &TierId, scheme: &str, value: &str) -> Result<CanonicalId> {
        Ok(self.tier(tier)?.aliases.resolve(scheme, value)?.clone())
    }

    // -- events -----------------------------------------------------------

    /// Subscribe a handler to structural changes. The handler must live
    /// in the same tier as the microdatabase; cross-tier visibility goes
    /// through replication, not events.
    pub fn subscribe(
        &mut self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: &StoreId,
        key_glob: &str,
        handler: HandlerRef,
    ) -> Result<SubscriptionId> {
        let m = self.mdb(mdb)?;
        if !m.has_store(store) {
            return Err(Error::UnknownStore(store.to_string()));
        }
        m.check(principal, Some(store), Action::Subscribe)?;
        if handler.tier() != &m.tier {
            return Err(Error::CrossTierSubscription {
                handler_tier: handler.tier().to_string(),
                mdb_tier: m.tier.to_string(),
            });
        }
        let sub_id = self.next_sub_id;
        self.next_sub_id += 1;
        self.subscriptions.insert(
            sub_id,
            Subscription {
                sub_id,
                principal: principal.clone(),
                mdb_id: mdb.clone(),
                store_id: store.clone(),
                key_glob: key_glob.to_string(),
                handler,
            },
        );
        Ok(sub_id)
    }

    pub fn subscribe_callback(
        &mut self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: &StoreId,
        key_glob: &str,
        tag: &str,
        f: EventCallback,
    ) -> Result<SubscriptionId> {
        let tier = self.mdb(mdb)?.tier.clone();
        let handler = HandlerRef::Callback {
            tier: tier.clone(),
            tag: tag.to_string(),
        };
        let sub_id = self.subscribe(principal, mdb, store, key_glob, handler)?;
        self.callbacks.insert((tier, tag.to_string()), f);
        Ok(sub_id)
    }

    pub fn unsubscribe(&mut self, sub_id: SubscriptionId) -> Result<()> {
        self.subscriptions
            .remove(&sub_id)
            .map(|_| ())
            .ok_or(Error::UnknownSubscription(sub_id))
    }

    /// Deliver pending events until every queue is empty or the budget
    /// runs out. Delivery order is (microdatabase id, event id); handlers
    /// may write and thereby enqueue more work for the same pump.
    pub fn pump(&mut self) -> PumpReport {
        let mut report = PumpReport::default();
        let mut processed = 0usize;
        loop {
            if processed >= self.pump_budget {
                break;
            }
            let Some(mdb_id) = self
                .mdbs
                .iter()
                .find(|(_, m)| m.pending_events() > 0)
                .map(|(id, _)| id.clone())
            else {
                break;
            };
            let event = self
                .mdbs
                .get_mut(&mdb_id)
                .expect("listed above")
                .pop_event()
                .expect("pending event");
            processed += 1;
            let subs: Vec<Subscription> = self
                .subscriptions
                .values()
                .filter(|s| {
                    s.mdb_id == event.mdb_id
                        && s.store_id == event.store_id
                        && crate::glob::glob_match(&s.key_glob, &event.key)
                })
                .cloned()
                .collect();
            for sub in subs {
                // The grant is re-checked at delivery time; a revoked
                // subscriber silently stops receiving.
                let still_allowed = self
                    .mdb(&sub.mdb_id)
                    .and_then(|m| m.check(&sub.principal, Some(&sub.store_id), Action::Subscribe));
                if let Err(e) = still_allowed {
                    self.record_delivery_failure(&sub, &event, e.to_string());
                    report.failed += 1;
                    continue;
                }
                match self.dispatch_to_handler(&sub, &event) {
                    Ok(()) => {
                        self.audit.push(AuditEvent::EventDelivered {
                            sub_id: sub.sub_id,
                            mdb: event.mdb_id.clone(),
                            store: event.store_id.clone(),
                            event_id: event.event_id,
                            op: event.op,
                            key: event.key.clone(),
                            handler: sub.handler.describe(),
                        });
                    }
                    Err(reason) => {
                        self.record_delivery_failure(&sub, &event, reason);
                        report.failed += 1;
                    }
                }
            }
            report.delivered += 1;
        }
        report
    }

    fn record_delivery_failure(&mut self, sub: &Subscription, event: &Event, reason: String) {
        self.audit.push(AuditEvent::DeliveryFailed {
            sub_id: sub.sub_id,
            mdb: event.mdb_id.clone(),
            event_id: event.event_id,
            reason: reason.clone(),
        });
        self.delivery_failures.push(DeliveryFailure {
            sub_id: sub.sub_id,
            event_id: event.event_id,
            mdb_id: event.mdb_id.clone(),
            reason,
        });
    }

    fn dispatch_to_handler(
        &mut self,
        sub: &Subscription,
        event: &Event,
    ) -> std::result::Result<(), String> {
        match &sub.handler {
            HandlerRef::Callback { tier, tag } => {
                let cb = self
                    .callbacks
                    .get(&(tier.clone(), tag.clone()))
                    .cloned()
                    .ok_or_else(|| format!("no callback registered for {tier}/{tag}"))?;
                cb(self, event)
            }
            HandlerRef::App { tier, app } => self
                .dispatch_event_to_app(tier.clone(), app.clone(), event)
                .map_err(|e| e.to_string()),
        }
    }

    fn dispatch_event_to_app(&mut self, tier: TierId, app_id: AppId, event: &Event) -> Result<()> {
        let app = self
            .tier(&tier)?
            .apps
            .get(&app_id)
            .cloned()
            .ok_or_else(|| Error::UnknownApp(app_id.to_string()))?;
        for rule in &app.rules {
            let AppRule::OnEvent {
                mdb,
                store,
                key_glob,
                scheme,
                action,
            } = rule
            else {
                continue;
            };
            if mdb != &event.mdb_id
                || store != &event.store_id
                || !crate::glob::glob_match(key_glob, &event.key)
            {
                continue;
            }
            let prefix = event.key.split('/').next().unwrap_or(&event.key);
            let asset = match scheme {
                None => CanonicalId::from(prefix),
                Some(s) => self.tier(&tier)?.aliases.resolve(s, prefix)?.clone(),
            };
            self.audit.push(AuditEvent::RuleFired {
                tier: tier.clone(),
                app: app_id.clone(),
                rule: format!("on-event {store} {key_glob}"),
                action: describe_action(action),
            });
            self.run_action(&tier, &app.principal, action, Some(&asset), event.ts)?;
        }
        Ok(())
    }

    fn run_action(
        &mut self,
        tier: &TierId,
        app_principal: &PrincipalId,
        action: &AppAction,
        asset: Option<&CanonicalId>,
        as_of: i64,
    ) -> Result<()> {
        match action {
            AppAction::Observe => Ok(()),
            AppAction::Invoke { service } => {
                let service_id = self.find_service_instance(tier, service)?;
                self.invoke_service(tier, &service_id, asset, as_of)?;
                Ok(())
            }
            AppAction::SubmitWork {
                mdb,
                store,
                target_tier,
                operation,
                params,
            } => {
                self.next_work_ordinal += 1;
                let request_id = format!("{operation}-{:04}", self.next_work_ordinal);
                let mut params = params.clone();
                if let Some(a) = asset {
                    params
                        .entry("asset".to_string())
                        .or_insert_with(|| Value::Str(a.to_string()));
                }
                self.submit_work(
                    app_principal,
                    mdb,
                    store,
                    &request_id,
                    target_tier,
                    operation,
                    params,
                )?;
                Ok(())
            }
        }
    }

    /// First deployed instance of this compute in the tier.
    fn find_service_instance(&self, tier: &TierId, compute_name: &str) -> Result<ServiceId> {
        self.tier(tier)?
            .services
            .values()
            .find(|s| s.compute_name == compute_name)
            .map(|s| s.service_id.clone())
            .ok_or_else(|| Error::UnknownService(compute_name.to_string()))
    }

    // -- replication ------------------------------------------------------

    /// Configure a replication link between microdatabases on adjacent
    /// tiers. The caller needs admin on at least one endpoint; what flows
    /// is the policies' business, not the plumber's.
    pub fn configure_link(
        &mut self,
        principal: &PrincipalId,
        link_id: LinkId,
        a: &MdbId,
        b: &MdbId,
        filter: FilterCriteria,
    ) -> Result<()> {
        if self.links.contains_key(&link_id) {
            return Err(Error::DuplicateLink(link_id.to_string()));
        }
        // One link per mdb pair: knowledge gating assumes each origin's
        // records reach a replica along a single filtered path.
        if self
            .links
            .values()
            .any(|l| (l.a == *a && l.b == *b) || (l.a == *b && l.b == *a))
        {
            return Err(Error::DuplicateLink(format!("{a} and {b} are already linked")));
        }
        filter.validate()?;
        let tier_a = self.mdb(a)?.tier.clone();
        let tier_b = self.mdb(b)?.tier.clone();
        self.link_state(&tier_a, &tier_b)?;
        let admin_a = self.mdb(a)?.check(principal, None, Action::Admin).is_ok();
        let admin_b = self.mdb(b)?.check(principal, None, Action::Admin).is_ok();
        if !admin_a && !admin_b {
            return Err(Error::Unauthorized {
                principal: principal.to_string(),
                action: "configure_link".to_string(),
                scope: link_id.to_string(),
            });
        }
        self.links.insert(
            link_id.clone(),
            ReplicaLink::new(link_id, a.clone(), b.clone(), filter),
        );
        Ok(())
    }

    pub fn link(&self, id: &LinkId) -> Result<&ReplicaLink> {
        self.links.get(id).ok_or_else(|| Error::UnknownLink(id.to_string()))
    }

    pub fn link_ids(&self) -> Vec<LinkId> {
        self.links.keys().cloned().collect()
    }

    /// Sync one link, both directions, through the wire format. Fails
    /// with LinkDown while the tier link is severed.
    pub fn sync_link(&mut self, link_id: &LinkId) -> Result<SyncReport> {
        let link = self
            .links
            .get(link_id)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))?;
        let (a, b) = (link.a.clone(), link.b.clone());
        let tier_a = self.mdb(&a)?.tier.clone();
        let tier_b = self.mdb(&b)?.tier.clone();
        if self.link_state(&tier_a, &tier_b)? == LinkState::Down {
            return Err(Error::LinkDown(link_id.to_string()));
        }
        let interrupt = self.sync_interrupt_after.take();
        let mut link = self.links.remove(link_id).expect("checked above");
        let forward = self.sync_one_direction(&mut link, true, interrupt);
        let reverse = match &forward {
            Ok(_) => self.sync_one_direction(&mut link, false, None),
            Err(_) => Ok(DirectionReport::default()),
        };
        self.links.insert(link_id.clone(), link);
        let forward = forward?;
        let reverse = reverse?;
        Ok(SyncReport {
            link_id: link_id.clone(),
            forward,
            reverse,
        })
    }

    fn sync_one_direction(
        &mut self,
        link: &mut ReplicaLink,
        forward: bool,
        interrupt: Option<usize>,
    ) -> Result<DirectionReport> {
        let (from, to) = if forward {
            (link.a.clone(), link.b.clone())
        } else {
            (link.b.clone(), link.a.clone())
        };
        let state = if forward { &link.a_to_b } else { &link.b_to_a };
        let sender = self.mdb(&from)?;
        let receiver = self.mdb(&to)?;
        let mut plan = plan_direction(sender, receiver, state, &link.filter);
        stamp_synthesis(self.mdb_mut(&from)?, &mut plan);
        let bytes = encode_batch(&plan.records);
        let batch = decode_batch(&bytes)?;
        let state = if forward { &mut link.a_to_b } else { &mut link.b_to_a };
        let receiver = self
            .mdbs
            .get_mut(&to)
            .ok_or_else(|| Error::UnknownMdb(to.to_string()))?;
        let mut report = apply_direction(receiver, state, batch, &plan, interrupt)?;
        report.from = from.clone();
        for t in &report.transfers {
            self.audit.push(AuditEvent::Transfer {
                link: link.link_id.clone(),
                from: from.clone(),
                to: to.clone(),
                store: t.store.clone(),
                key: t.key.clone(),
                ts: t.ts,
                origin: t.origin.clone(),
                origin_clock: t.origin_clock,
                revision: t.revision,
                synthesized: t.synthesized,
                applied: t.applied,
            });
        }
        Ok(report)
    }

    // -- work requests ----------------------------------------------------

    /// Submit a work request toward a target tier. The request must be
    /// able to travel: some chain of links over stores of kind work must
    /// connect this microdatabase to the target tier.
    #[allow(clippy::too_many_arguments)]
    pub fn submit_work(
        &mut self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: &StoreId,
        request_id: &str,
        target_tier: &TierId,
        operation: &str,
        params: BTreeMap<String, Value>,
    ) -> Result<String> {
        self.tier(target_tier)?;
        let m = self.mdb(mdb)?;
        let s = m.store(store)?;
        if s.kind != StoreKind::Work {
            return Err(Error::KindMismatch(format!(
                "store {store} is {}, not work",
                s.kind.name()
            )));
        }
        if s.all_records().any(|r| r.key == request_id && !r.is_tombstone()) {
            return Err(Error::DuplicateRequest(request_id.to_string()));
        }
        let requester_tier = m.tier.clone();
        if !self.work_route_exists(mdb, store, target_tier) {
            return Err(Error::UnreachableTarget {
                from: requester_tier.to_string(),
                to: target_tier.to_string(),
            });
        }
        let request = WorkRequest {
            request_id: crate::ids::RequestId::from(request_id),
            operation: operation.to_string(),
            params,
            requester_tier: requester_tier.clone(),
            target_tier: target_tier.clone(),
            submitted_ts: self.clock_ms,
            status: WorkStatus::Created,
        };
        let ts = self.clock_ms;
        let encoded = request.encode();
        self.mdb_mut(mdb)?.put(principal, store, request_id, ts, encoded)?;
        self.audit.push(AuditEvent::WorkTransition {
            request: request_id.to_string(),
            tier: requester_tier,
            from: "none".to_string(),
            to: "created".to_string(),
        });
        self.work_index.push_back(WorkIndexEntry {
            request_id: request_id.to_string(),
            mdb: mdb.clone(),
            store: store.clone(),
            submitted_cycle: self.cycle,
        });
        Ok(request_id.to_string())
    }

    /// Breadth-first over links whose two endpoints both hold this work
    /// store; link state is ignored because a down link may heal.
    fn work_route_exists(&self, from_mdb: &MdbId, store: &StoreId, target_tier: &TierId) -> bool {
        let has_work_store = |mdb_id: &MdbId| {
            self.mdbs
                .get(mdb_id)
                .and_then(|m| m.store(store).ok())
                .map(|s| s.kind == StoreKind::Work)
                .unwrap_or(false)
        };
        if !has_work_store(from_mdb) {
            return false;
        }
        let mut seen: BTreeSet<MdbId> = BTreeSet::new();
        let mut queue: VecDeque<MdbId> = VecDeque::new();
        seen.insert(from_mdb.clone());
        queue.push_back(from_mdb.clone());
        while let Some(cur) = queue.pop_front() {
            if let Some(m) = self.mdbs.get(&cur) {
                if &m.tier == target_tier {
                    return true;
                }
            }
            for link in self.links.values() {
                let next = if link.a == cur {
                    &link.b
                } else if link.b == cur {
                    &link.a
                } else {
                    continue;
                };
                if !seen.contains(next) && has_work_store(next) {
                    seen.insert(next.clone());
                    queue.push_back(next.clone());
                }
            }
        }
        false
    }

    /// Latest status of a request visible in this microdatabase.
    pub fn work_status(
        &self,
        principal: &PrincipalId,
        mdb: &MdbId,
        store: &StoreId,
        request_id: &str,
    ) -> Result<WorkRequest> {
        let m = self.mdb(mdb)?;
        m.check(principal, Some(store), Action::Read)?;
        let s = m.store(store)?;
        let rec = s
            .all_records()
            .filter(|r| r.key == request_id && !r.is_tombstone())
            .max_by_key(|r| r.ts)
            .ok_or_else(|| Error::UnknownRequest(request_id.to_string()))?;
        WorkRequest::decode(rec.value.as_ref().expect("live record"))
    }

    fn load_work_record(&self, mdb: &MdbId, store: &StoreId, request_id: &str) -> Option<(i64, WorkRequest)> {
        let m = self.mdbs.get(mdb)?;
        let s = m.store(store).ok()?;
        let rec = s
            .all_records()
            .filter(|r| r.key == request_id && !r.is_tombstone())
            .max_by_key(|r| r.ts)?;
        let req = WorkRequest::decode(rec.value.as_ref()?).ok()?;
        Some((rec.ts, req))
    }

    /// Platform-side transition: overwrite the request record with a new
    /// status. Last-writer-wins resolves races between tiers.
    fn transition_work(
        &mut self,
        mdb: &MdbId,
        store: &StoreId,
        ts: i64,
        req: &WorkRequest,
        next: WorkStatus,
    ) -> Result<WorkRequest> {
        let tier = self.mdb(mdb)?.tier.clone();
        let from = req.status.name().to_string();
        let to = next.name().to_string();
        let updated = req.transition(next)?;
        self.mdb_mut(mdb)?
            .platform_put(store, req.request_id.as_str(), ts, updated.encode())?;
        self.audit.push(AuditEvent::WorkTransition {
            request: req.request_id.to_string(),
            tier,
            from,
            to,
        });
        Ok(updated)
    }

    /// Requester-side phase: expire overdue requests, dispatch fresh ones.
    fn work_requester_phase(&mut self, transitions: &mut Vec<String>) {
        let entries: Vec<WorkIndexEntry> = self.work_index.iter().cloned().collect();
        let mut keep: VecDeque<WorkIndexEntry> = VecDeque::new();
        for entry in entries {
            let Some((ts, req)) = self.load_work_record(&entry.mdb, &entry.store, &entry.request_id)
            else {
                continue;
            };
            if req.status.is_terminal() {
                continue;
            }
            let waited = self.cycle.saturating_sub(entry.submitted_cycle);
            let expired = waited >= self.work_expiry_cycles;
            let result = match (&req.status, expired) {
                (WorkStatus::Created | WorkStatus::Dispatched, true) => self
                    .transition_work(
                        &entry.mdb,
                        &entry.store,
                        ts,
                        &req,
                        WorkStatus::Failed {
                            reason: "expired".to_string(),
                        },
                    )
                    .map(Some),
                (WorkStatus::Created, false) => self
                    .transition_work(&entry.mdb, &entry.store, ts, &req, WorkStatus::Dispatched)
                    .map(Some),
                _ => Ok(None),
            };
            match result {
                Ok(Some(updated)) => {
                    transitions.push(format!(
                        "{} {} -> {}",
                        entry.request_id,
                        req.status.name(),
                        updated.status.name()
                    ));
                    if !updated.status.is_terminal() {
                        keep.push_back(entry);
                    }
                }
                Ok(None) => keep.push_back(entry),
                Err(_) => keep.push_back(entry),
            }
        }
        self.work_index = keep;
    }

    /// Target-side phase: claim dispatched requests this tier is the
    /// target of, and run the first matching on-work rule.
    fn work_target_phase(&mut self, transitions: &mut Vec<String>) {
        // Collect claims first; execution mutates freely afterwards.
        let mut claims: Vec<(TierId, MdbId, StoreId, i64, WorkRequest)> = Vec::new();
        for (mdb_id, m) in &self.mdbs {
            for store in m.stores() {
                if store.kind != StoreKind::Work {
                    continue;
                }
                let mut latest: BTreeMap<&str, &Record> = BTreeMap::new();
                for rec in store.all_records() {
                    if rec.is_tombstone() {
                        continue;
                    }
                    match latest.get(rec.key.as_str()) {
                        Some(prev) if prev.ts >= rec.ts => {}
                        _ => {
                            latest.insert(&rec.key, rec);
                        }
                    }
                }
                for rec in latest.values() {
                    let Some(value) = rec.value.as_ref() else { continue };
                    let Ok(req) = WorkRequest::decode(value) else {
                        continue;
                    };
                    if req.status == WorkStatus::Dispatched && req.target_tier == m.tier {
                        claims.push((m.tier.clone(), mdb_id.clone(), store.id.clone(), rec.ts, req));
                    }
                }
            }
        }
        for (tier, mdb_id, store_id, ts, req) in claims {
            // Re-read: an earlier claim in this same phase may have
            // advanced it.
            let Some((_, current)) = self.load_work_record(&mdb_id, &store_id, req.request_id.as_str())
            else {
                continue;
            };
            if current.status != WorkStatus::Dispatched {
                continue;
            }
            let Some((app_id, principal, action)) = self.find_work_rule(&tier, &req.operation) else {
                continue;
            };
            let accepted =
                match self.transition_work(&mdb_id, &store_id, ts, &req, WorkStatus::Accepted) {
                    Ok(r) => r,
                    Err(_) => continue,
                };
            transitions.push(format!("{} dispatched -> accepted", req.request_id));
            self.audit.push(AuditEvent::RuleFired {
                tier: tier.clone(),
                app: app_id,
                rule: format!("on-work {}", req.operation),
                action: describe_action(&action),
            });
            let executing = match self.transition_work(
                &mdb_id,
                &store_id,
                ts,
                &accepted,
                WorkStatus::Executing,
            ) {
                Ok(r) => r,
                Err(_) => continue,
            };
            transitions.push(format!("{} accepted -> executing", req.request_id));
            let outcome = self.execute_work_action(&tier, &principal, &action, &executing);
            let next = match outcome {
                Ok(result) => WorkStatus::Completed { result },
                Err(e) => WorkStatus::Failed {
                    reason: e.to_string(),
                },
            };
            let label = next.name();
            if self
                .transition_work(&mdb_id, &store_id, ts, &executing, next)
                .is_ok()
            {
                transitions.push(format!("{} executing -> {label}", req.request_id));
            }
        }
    }

    fn find_work_rule(
        &self,
        tier: &TierId,
        operation: &str,
    ) -> Option<(AppId, PrincipalId, AppAction)> {
        let t = self.tiers.get(tier)?;
        for app in t.apps.values() {
            for rule in &app.rules {
                if let AppRule::OnWork { operation: op, action } = rule {
                    if op == operation {
                        return Some((app.app_id.clone(), app.principal.clone(), action.clone()));
                    }
                }
            }
        }
        None
    }

    fn execute_work_action(
        &mut self,
        tier: &TierId,
        principal: &PrincipalId,
        action: &AppAction,
        req: &WorkRequest,
    ) -> Result<BTreeMap<String, Value>> {
        match action {
            AppAction::Observe => Ok(BTreeMap::new()),
            AppAction::Invoke { service } => {
                let asset = match req.params.get("asset") {
                    Some(Value::Str(s)) => Some(CanonicalId::from(s.as_str())),
                    _ => None,
                };
                let service_id = self.find_service_instance(tier, service)?;
                self.invoke_service(tier, &service_id, asset.as_ref(), self.clock_ms)
            }
            AppAction::SubmitWork { .. } => {
                self.run_action(tier, principal, action, None, self.clock_ms)?;
                Ok(BTreeMap::new())
            }
        }
    }

    // -- cycle ------------------------------------------------------------

    /// One full cycle: pump events, sync links in id order, purge expired
    /// records, then move work.
    pub fn run_cycle(&mut self) -> CycleReport {
        let pump = self.pump();
        let mut report = CycleReport {
            cycle: self.cycle,
            clock_ms: self.clock_ms,
            events_delivered: pump.delivered,
            deliveries_failed: pump.failed,
            ..CycleReport::default()
        };

        for link_id in self.link_ids() {
            match self.sync_link(&link_id) {
                Ok(sync) => report.links.push(LinkCycleEntry {
                    link_id,
                    skipped: None,
                    forward_transferred: sync.forward.transferred,
                    reverse_transferred: sync.reverse.transferred,
                }),
                Err(e) => {
                    self.audit.push(AuditEvent::LinkSkipped {
                        link: link_id.clone(),
                        reason: e.to_string(),
                    });
                    report.links.push(LinkCycleEntry {
                        link_id,
                        skipped: Some(e.variant_name().to_string()),
                        forward_transferred: 0,
                        reverse_transferred: 0,
                    });
                }
            }
        }

        let now = self.clock_ms;
        let mdb_ids = self.mdb_ids();
        for id in mdb_ids {
            if let Ok(m) = self.mdb_mut(&id) {
                report.purged += m.purge_expired(now).len();
            }
        }

        self.work_requester_phase(&mut report.work_transitions);
        self.work_target_phase(&mut report.work_transitions);

        self.cycle += 1;
        report
    }

    pub fn run_cycles(&mut self, n: usize) -> Vec<CycleReport> {
        (0..n).map(|_| self.run_cycle()).collect()
    }

    // -- framework --------------------------------------------------------

    pub fn register_compute(&mut self, compute: Arc<dyn ServiceCompute>) -> Result<()> {
        self.computes.register(compute)
    }

    pub fn register_provider_factory(&mut self, factory: Arc<dyn ProviderFactory>) -> Result<()> {
        self.provider_factories.register(factory)
    }

    pub fn compute_names(&self) -> Vec<String> {
        self.computes.names().into_iter().map(String::from).collect()
    }

    pub fn create_provider(
        &mut self,
        principal: &PrincipalId,
        tier: &TierId,
        provider_id: ProviderId,
        factory: &str,
        config: &BTreeMap<String, Value>,
    ) -> Result<()> {
        let t = self.tier(tier)?;
        if t.owner != *principal {
            return Err(Error::Unauthorized {
                principal: principal.to_string(),
                action: "create_provider".to_string(),
                scope: tier.to_string(),
            });
        }
        if t.providers.contains_key(&provider_id) {
            return Err(Error::ConflictingRedefinition(provider_id.to_string()));
        }
        let instance = self.provider_factories.get(factory)?.build(config)?;
        self.tier_mut(tier)?.providers.insert(provider_id, instance);
        Ok(())
    }

    pub fn set_config_store(
        &mut self,
        principal: &PrincipalId,
        tier: &TierId,
        mdb: &MdbId,
        store: &StoreId,
    ) -> Result<()> {
        let t = self.tier(tier)?;
        if t.owner != *principal {
            return Err(Error::Unauthorized {
                principal: principal.to_string(),
                action: "set_config_store".to_string(),
                scope: tier.to_string(),
            });
        }
        let m = self.mdb(mdb)?;
        if m.tier != *tier {
            return Err(Error::CrossTierReference(format!(
                "config store {mdb} is not in tier {tier}"
            )));
        }
        let s = m.store(store)?;
        if s.kind != StoreKind::Config {
            return Err(Error::KindMismatch(format!(
                "store {store} is {}, not config",
                s.kind.name()
            )));
        }
        self.tier_mut(tier)?.config_store = Some((mdb.clone(), store.clone()));
        Ok(())
    }

    /// Deploy a parsed service description. Bindings resolve against this
    /// tier only; persisted parameters from the tier config store are
    /// rehydrated last so operator settings survive redeploys.
    pub fn deploy_service_spec(
        &mut self,
        tier: &TierId,
        spec: &ServiceSpec,
        principal: PrincipalId,
    ) -> Result<ServiceId> {
        self.principals.get(&principal)?;
        let compute = self.computes.get(&spec.compute)?.clone();
        let input_slots = compute.input_slots();
        let output_slots = compute.output_slots();

        let mut inputs = Vec::new();
        for input in &spec.inputs {
            match input {
                ServiceSpecInput::Store {
                    slot,
                    mdb_name,
                    store,
                    pattern,
                    window_ms,
                } => {
                    if !input_slots.iter().any(|s| &s.name == slot) {
                        return Err(Error::UnknownSlot(slot.clone()));
                    }
                    let mdb_id = MdbId::compose(tier, mdb_name);
                    let m = self.mdb(&mdb_id)?;
                    m.store(store)?;
                    inputs.push(InputBinding {
                        slot: slot.clone(),
                        binding: SlotBinding::Store {
                            mdb: mdb_id,
                            store: store.clone(),
                            key_pattern: pattern.clone(),
                            window_ms: *window_ms,
                        },
                    });
                }
                ServiceSpecInput::Related {
                    slot,
                    provider,
                    window_ms,
                } => {
                    let slot_spec = input_slots
                        .iter()
                        .find(|s| &s.name == slot)
                        .ok_or_else(|| Error::UnknownSlot(slot.clone()))?;
                    if slot_spec.shape == SlotShape::PerKey {
                        return Err(Error::InvalidValue(format!(
                            "slot {slot} is per-key and cannot bind to a provider"
                        )));
                    }
                    if !spec.connections.contains(provider) {
                        return Err(Error::UndeclaredProvider(provider.to_string()));
                    }
                    inputs.push(InputBinding {
                        slot: slot.clone(),
                        binding: SlotBinding::Related {
                            provider: provider.clone(),
                            window_ms: *window_ms,
                        },
                    });
                }
            }
        }

        let mut outputs = Vec::new();
        for output in &spec.outputs {
            output_slots
                .iter()
                .find(|s| s.name == output.slot)
                .ok_or_else(|| Error::UnknownSlot(output.slot.clone()))?;
            let mdb_id = MdbId::compose(tier, &output.mdb_name);
            let m = self.mdb(&mdb_id)?;
            m.store(&output.store)?;
            outputs.push(OutputBinding {
                slot: output.slot.clone(),
                mdb: mdb_id,
                store: output.store.clone(),
                key_pattern: output.pattern.clone(),
            });
        }

        let defaults = compute.default_params();
        let mut params = defaults.clone();
        for (k, v) in &spec.params {
            if !defaults.contains_key(k) {
                return Err(Error::UnknownParam(k.clone()));
            }
            params.insert(k.clone(), v.clone());
        }
        // Rehydrate persisted settings, keyed by compute name so they
        // outlive any particular instance.
        if let Some((cfg_mdb, cfg_store)) = self.tier(tier)?.config_store.clone() {
            let prefix = format!("{}/", spec.compute);
            if let Ok(m) = self.mdb(&cfg_mdb) {
                if let Ok(s) = m.store(&cfg_store) {
                    for rec in s.latest_per_key("*", i64::MAX) {
                        if let Some(param) = rec.key.strip_prefix(&prefix) {
                            if defaults.contains_key(param) {
                                params.insert(
                                    param.to_string(),
                                    rec.value.clone().expect("live record"),
                                );
                            }
                        }
                    }
                }
            }
        }

        let model_mdb = match &spec.model_mdb_name {
            Some(name) => {
                let id = MdbId::compose(tier, name);
                self.mdb(&id)?;
                Some(id)
            }
            None => None,
        };

        let ordinal = self.tier_mut(tier)?.next_ordinal(&spec.compute);
        let service_id = ServiceId::from(format!("{}#{}", spec.compute, ordinal).as_str());
        let instance = ServiceInstance {
            service_id: service_id.clone(),
            compute_name: spec.compute.clone(),
            tier: tier.clone(),
            principal,
            params,
            inputs,
            outputs,
            model_mdb,
            declared_connections: spec.connections.clone(),
        };
        self.tier_mut(tier)?
            .services
            .insert(service_id.clone(), instance);
        Ok(service_id)
    }

    /// Deploy a parsed app description and wire its event rules into
    /// subscriptions under the app's principal.
    pub fn deploy_app_spec(
        &mut self,
        tier: &TierId,
        name: &str,
        spec: &AppSpec,
        principal: PrincipalId,
    ) -> Result<AppId> {
        self.principals.get(&principal)?;
        self.tier(tier)?;
        let mut rules = Vec::new();
        for rule in &spec.rules {
            rules.push(match rule {
                AppSpecRule::OnEvent {
                    mdb_name,
                    store,
                    key_glob,
                    scheme,
                    action,
                } => {
                    let mdb_id = MdbId::compose(tier, mdb_name);
                    let m = self.mdb(&mdb_id)?;
                    m.store(store)?;
                    AppRule::OnEvent {
                        mdb: mdb_id,
                        store: store.clone(),
                        key_glob: key_glob.clone(),
                        scheme: scheme.clone(),
                        action: self.resolve_action(tier, action)?,
                    }
                }
                AppSpecRule::OnWork { operation, action } => AppRule::OnWork {
                    operation: operation.clone(),
                    action: self.resolve_action(tier, action)?,
                },
                AppSpecRule::OnSchedule { tag, action } => AppRule::OnSchedule {
                    tag: tag.clone(),
                    action: self.resolve_action(tier, action)?,
                },
            });
        }
        let ordinal = self.tier_mut(tier)?.next_ordinal(name);
        let app_id = AppId::from(format!("{name}#{ordinal}").as_str());
        let app = AppInstance {
            app_id: app_id.clone(),
            name: name.to_string(),
            tier: tier.clone(),
            principal: principal.clone(),
            rules: rules.clone(),
        };
        self.tier_mut(tier)?.apps.insert(app_id.clone(), app);
        for rule in &rules {
            if let AppRule::OnEvent {
                mdb, store, key_glob, ..
            } = rule
            {
                self.subscribe(
                    &principal,
                    mdb,
                    store,
                    key_glob,
                    HandlerRef::App {
                        tier: tier.clone(),
                        app: app_id.clone(),
                    },
                )?;
            }
        }
        Ok(app_id)
    }

    fn resolve_action(&self, tier: &TierId, action: &AppSpecAction) -> Result<AppAction> {
        Ok(match action {
            AppSpecAction::Invoke { service } => AppAction::Invoke {
                service: service.clone(),
            },
            AppSpecAction::Observe => AppAction::Observe,
            AppSpecAction::SubmitWork {
                mdb_name,
                store,
                target_tier,
                operation,
                params,
            } => {
                let mdb_id = MdbId::compose(tier, mdb_name);
                self.mdb(&mdb_id)?;
                self.tier(target_tier)?;
                AppAction::SubmitWork {
                    mdb: mdb_id,
                    store: store.clone(),
                    target_tier: target_tier.clone(),
                    operation: operation.clone(),
                    params: params.clone(),
                }
            }
        })
    }

    /// Fire a named schedule in a tier: run every app rule waiting on it.
    pub fn fire_schedule(&mut self, tier: &TierId, tag: &str) -> Result<ScheduleReport> {
        self.tier(tier)?;
        self.audit.push(AuditEvent::ScheduleFired {
            tier: tier.clone(),
            tag: tag.to_string(),
        });
        let mut report = ScheduleReport {
            tier: tier.clone(),
            tag: tag.to_string(),
            rules_fired: 0,
            failures: Vec::new(),
        };
        let apps: Vec<AppInstance> = self.tier(tier)?.apps.values().cloned().collect();
        for app in apps {
            for rule in &app.rules {
                let AppRule::OnSchedule { tag: t, action } = rule else {
                    continue;
                };
                if t != tag {
                    continue;
                }
                self.audit.push(AuditEvent::RuleFired {
                    tier: tier.clone(),
                    app: app.app_id.clone(),
                    rule: format!("on-schedule {tag}"),
                    action: describe_action(action),
                });
                report.rules_fired += 1;
                if let Err(e) =
                    self.run_action(tier, &app.principal, action, None, self.clock_ms)
                {
                    report.failures.push(format!("{}: {e}", app.app_id));
                }
            }
        }
        Ok(report)
    }

    /// Run a deployed service against an asset at a point in time: resolve
    /// every input under the service principal's grants, call the pure
    /// compute, write the outputs back.
    pub fn invoke_service(
        &mut self,
        tier: &TierId,
        service_id: &ServiceId,
        asset: Option<&CanonicalId>,
        as_of: i64,
    ) -> Result<BTreeMap<String, Value>> {
        let svc = self
            .tier(tier)?
            .services
            .get(service_id)
            .cloned()
            .ok_or_else(|| Error::UnknownService(service_id.to_string()))?;
        let compute = self.computes.get(&svc.compute_name)?.clone();
        let input_slots = compute.input_slots();
        let output_slots = compute.output_slots();

        let mut inputs = ResolvedInputs {
            asset: asset.cloned(),
            as_of,
            ..ResolvedInputs::default()
        };

        for binding in &svc.inputs {
            let spec = input_slots
                .iter()
                .find(|s| s.name == binding.slot)
                .ok_or_else(|| Error::UnknownSlot(binding.slot.clone()))?;
            match &binding.binding {
                SlotBinding::Store {
                    mdb,
                    store,
                    key_pattern,
                    window_ms,
                } => {
                    let m = self.mdb(mdb)?;
                    if m.tier != svc.tier {
                        return Err(Error::CrossTierReference(format!(
                            "service {service_id} reads {mdb} outside tier {}",
                            svc.tier
                        )));
                    }
                    let key = substitute_pattern(key_pattern, asset, &self.tier(tier)?.aliases)?;
                    self.audit.push(AuditEvent::StoreRead {
                        tier: tier.clone(),
                        principal: svc.principal.clone(),
                        mdb: mdb.clone(),
                        store: store.clone(),
                        pattern: key.clone(),
                    });
                    let m = self.mdb(mdb)?;
                    resolve_store_slot(
                        m,
                        &svc.principal,
                        spec,
                        store,
                        &key,
                        *window_ms,
                        as_of,
                        &mut inputs,
                    )?;
                }
                SlotBinding::Related {
                    provider,
                    window_ms,
                } => {
                    if !svc.declared_connections.contains(provider) {
                        return Err(Error::UndeclaredProvider(provider.to_string()));
                    }
                    let context = self.provider_context(&svc, asset);
                    let window = match (spec.shape, window_ms) {
                        (SlotShape::Series, Some(w)) => (as_of.saturating_sub(*w), as_of),
                        _ => (i64::MIN, as_of),
                    };
                    let query = RelatedQuery {
                        provider: provider.clone(),
                        asset: asset.cloned(),
                        window,
                        context,
                    };
                    let t = self.tier(tier)?;
                    let source = t
                        .providers
                        .get(provider)
                        .ok_or_else(|| Error::UnknownProvider(provider.to_string()))?;
                    let points = source.fetch(&query)?;
                    self.audit.push(AuditEvent::RelatedFetched {
                        tier: tier.clone(),
                        service: service_id.clone(),
                        provider: provider.clone(),
                        points: points.len(),
                    });
                    resolve_related_slot(spec, points, as_of, &mut inputs)?;
                }
            }
        }

        let outputs = compute.compute(&inputs, &svc.params)?;
        for name in outputs.keys() {
            if !output_slots.iter().any(|s| &s.name == name) {
                return Err(Error::UnknownSlot(name.clone()));
            }
        }

        for binding in &svc.outputs {
            let Some(value) = outputs.get(&binding.slot) else {
                continue;
            };
            let key = substitute_pattern(&binding.key_pattern, asset, &self.tier(tier)?.aliases)?;
            let rec = self.mdb_mut(&binding.mdb)?.put(
                &svc.principal,
                &binding.store,
                &key,
                as_of,
                value.clone(),
            )?;
            self.audit.push(AuditEvent::StoreWritten {
                tier: tier.clone(),
                principal: svc.principal.clone(),
                mdb: binding.mdb.clone(),
                store: binding.store.clone(),
                key,
                ts: as_of,
                revision: rec.revision,
            });
        }
        Ok(outputs)
    }

    /// Context handed to providers: canonical id, instance tags parsed at
    /// the first `:`, and reverse aliases. Assembled by the platform, so
    /// it reads the model directly.
    fn provider_context(
        &self,
        svc: &ServiceInstance,
        asset: Option<&CanonicalId>,
    ) -> BTreeMap<String, String> {
        let mut context = BTreeMap::new();
        let Some(asset) = asset else {
            return context;
        };
        context.insert("asset".to_string(), asset.to_string());
        if let Some(model_mdb) = &svc.model_mdb {
            if let Ok(m) = self.mdb(model_mdb) {
                if let Some(instance) = m.model.instance(asset) {
                    for tag in &instance.tags {
                        if let Some((k, v)) = tag.split_once(':') {
                            context.insert(k.to_string(), v.to_string());
                        }
                    }
                }
            }
        }
        if let Ok(t) = self.tier(&svc.tier) {
            for (scheme, value, canon) in t.aliases.entries() {
                if canon == asset {
                    context.insert(format!("alias.{scheme}"), value.to_string());
                }
            }
        }
        context
    }

    /// Change one service parameter: validated against the compute's
    /// declared parameters and persisted in the tier config store.
    pub fn set_param(
        &mut self,
        principal: &PrincipalId,
        tier: &TierId,
        service_id: &ServiceId,
        key: &str,
        value: Value,
    ) -> Result<()> {
        let svc = self
            .tier(tier)?
            .services
            .get(service_id)
            .cloned()
            .ok_or_else(|| Error::UnknownService(service_id.to_string()))?;
        let compute = self.computes.get(&svc.compute_name)?.clone();
        if !compute.default_params().contains_key(key) {
            return Err(Error::UnknownParam(key.to_string()));
        }
        let Some((cfg_mdb, cfg_store)) = self.tier(tier)?.config_store.clone() else {
            return Err(Error::NoConfigStore(tier.to_string()));
        };
        let persisted_key = format!("{}/{}", svc.compute_name, key);
        let ts = self.clock_ms;
        self.mdb_mut(&cfg_mdb)?
            .put(principal, &cfg_store, &persisted_key, ts, value.clone())?;
        if let Some(instance) = self.tier_mut(tier)?.services.get_mut(service_id) {
            instance.params.insert(key.to_string(), value);
        }
        Ok(())
    }

    pub fn service(&self, tier: &TierId, service_id: &ServiceId) -> Result<&ServiceInstance> {
        self.tier(tier)?
            .services
            .get(service_id)
            .ok_or_else(|| Error::UnknownService(service_id.to_string()))
    }

    // -- app store --------------------------------------------------------

    pub fn publish(
        &mut self,
        manifest: crate::appstore::Manifest,
        payload: String,
    ) -> Result<()> {
        let at = self.clock_ms;
        self.catalog.publish(manifest, payload, at)
    }

    fn connection_satisfied(&self, tier: &Tier, conn: &crate::appstore::Connection) -> bool {
        match conn {
            crate::appstore::Connection::Mdb(name) => tier.mdb_names.contains(name),
            crate::appstore::Connection::Provider(p) => tier.providers.contains_key(p),
            crate::appstore::Connection::Link(other) => self
                .adjacency
                .contains_key(&Self::adjacency_key(&tier.id, other)),
        }
    }

    /// Deploy a catalog entry into a tier. Gates: the deployer owns the
    /// tier, the platform version matches exactly, and every declared
    /// connection is either satisfiable here or explicitly acknowledged.
    pub fn deploy_from_catalog(
        &mut self,
        principal: &PrincipalId,
        tier: &TierId,
        name: &str,
        version: &Version,
        as_name: Option<&str>,
        as_principal: Option<PrincipalId>,
    ) -> Result<String> {
        let t = self.tier(tier)?;
        if t.owner != *principal {
            return Err(Error::Unauthorized {
                principal: principal.to_string(),
                action: "deploy".to_string(),
                scope: tier.to_string(),
            });
        }
        let entry: CatalogEntry = self.catalog.get(name, version)?.clone();
        check_version(entry.manifest.required_platform_version, t.platform_version)?;
        for decl in &entry.manifest.connections {
            if !decl.acknowledged && !self.connection_satisfied(t, &decl.connection) {
                return Err(Error::UnacknowledgedConnection(decl.connection.describe()));
            }
        }
        let actor = as_principal.unwrap_or_else(|| principal.clone());
        let deployed_id = self.materialize(
            tier,
            entry.manifest.kind,
            &entry.payload,
            as_name.unwrap_or(name),
            actor,
        )?;
        self.catalog.record_provenance(
            name,
            version,
            ProvenanceRecord {
                action: "deployed".to_string(),
                principal: principal.clone(),
                tier: Some(tier.clone()),
                at_ms: self.clock_ms,
            },
        )?;
        self.audit.push(AuditEvent::Deployed {
            tier: tier.clone(),
            name: name.to_string(),
            version: version.to_string(),
            kind: entry.manifest.kind.name().to_string(),
            conventional: false,
        });
        Ok(deployed_id)
    }

    /// Deployment outside the catalog: no trust, hash, or connection
    /// gates, but loudly recorded as conventional.
    pub fn deploy_conventional(
        &mut self,
        principal: &PrincipalId,
        tier: &TierId,
        kind: ManifestKind,
        name: &str,
        payload: &str,
        as_principal: Option<PrincipalId>,
    ) -> Result<String> {
        let t = self.tier(tier)?;
        if t.owner != *principal {
            return Err(Error::Unauthorized {
                principal: principal.to_string(),
                action: "deploy".to_string(),
                scope: tier.to_string(),
            });
        }
        let actor = as_principal.unwrap_or_else(|| principal.clone());
        let deployed_id = self.materialize(tier, kind, payload, name, actor)?;
        self.audit.push(AuditEvent::Deployed {
            tier: tier.clone(),
            name: name.to_string(),
            version: "unversioned".to_string(),
            kind: kind.name().to_string(),
            conventional: true,
        });
        Ok(deployed_id)
    }

    fn materialize(
        &mut self,
        tier: &TierId,
        kind: ManifestKind,
        payload: &str,
        name: &str,
        actor: PrincipalId,
    ) -> Result<String> {
        match kind {
            ManifestKind::MdbTemplate => {
                let spec = parse_template_payload(payload)?;
                let owner = self.tier(tier)?.owner.clone();
                let mdb_id = self.create_mdb(&owner, tier, name)?;
                for (store, store_kind) in &spec.stores {
                    self.mdb_mut(&mdb_id)?
                        .create_store(&owner, store.clone(), *store_kind)?;
                }
                for ty in &spec.types {
                    self.mdb_mut(&mdb_id)?.define_type(&owner, ty.clone())?;
                }
                Ok(mdb_id.to_string())
            }
            ManifestKind::AppService => {
                let spec = parse_service_payload(payload)?;
                Ok(self.deploy_service_spec(tier, &spec, actor)?.to_string())
            }
            ManifestKind::App => {
                let spec = parse_app_payload(payload)?;
                Ok(self.deploy_app_spec(tier, name, &spec, actor)?.to_string())
            }
        }
    }

    // -- state inspection -------------------------------------------------

    /// Canonical text of one store, for convergence checks.
    pub fn store_state(&self, mdb: &MdbId, store: &StoreId) -> Result<String> {
        Ok(self.mdb(mdb)?.store(store)?.canonical_state())
    }
}

fn describe_action(action: &AppAction) -> String {
    match action {
        AppAction::Invoke { service } => format!("invoke {service}"),
        AppAction::Observe => "observe".to_string(),
        AppAction::SubmitWork {
            target_tier,
            operation,
            ..
        } => format!("submit-work {operation} -> {target_tier}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_with_tiers() -> (Simulation, PrincipalId) {
        let mut sim = Simulation::new();
        let owner = PrincipalId::from("utilA");
        sim.register_principal(owner.clone(), PrincipalKind::Owner, "tok-owner")
            .unwrap();
        sim.create_tier(
            TierId::from("plant-a"),
            TierLevel::Plant,
            owner.clone(),
            Version::parse("1.0.0").unwrap(),
        )
        .unwrap();
        sim.create_tier(
            TierId::from("local-1"),
            TierLevel::Local,
            owner.clone(),
            Version::parse("1.0.0").unwrap(),
        )
        .unwrap();
        sim.create_tier(
            TierId::from("regional-1"),
            TierLevel::Regional,
            owner.clone(),
            Version::parse("1.0.0").unwrap(),
        )
        .unwrap();
        sim.declare_adjacent(&TierId::from("plant-a"), &TierId::from("local-1"))
            .unwrap();
        sim.declare_adjacent(&TierId::from("local-1"), &TierId::from("regional-1"))
            .unwrap();
        (sim, owner)
    }

    #[test]
    fn adjacency_requires_neighboring_levels() {
        let (mut sim, _) = sim_with_tiers();
        let err = sim
            .declare_adjacent(&TierId::from("plant-a"), &TierId::from("regional-1"))
            .unwrap_err();
        assert_eq!(err.variant_name(), "NonAdjacentTiers");
        assert_eq!(
            sim.declare_adjacent(&TierId::from("plant-a"), &TierId::from("nowhere"))
                .unwrap_err()
                .variant_name(),
            "UnknownTier"
        );
        // Link state toggles on declared pairs only.
        sim.set_link_state(&TierId::from("plant-a"), &TierId::from("local-1"), LinkState::Down)
            .unwrap();
        assert_eq!(
            sim.link_state(&TierId::from("plant-a"), &TierId::from("local-1")).unwrap(),
            LinkState::Down
        );
        assert!(sim
            .set_link_state(&TierId::from("plant-a"), &TierId::from("regional-1"), LinkState::Down)
            .is_err());
    }

    #[test]
    fn mdb_creation_is_owner_only_and_name_unique() {
        let (mut sim, owner) = sim_with_tiers();
        let intruder = PrincipalId::from("intruder");
        sim.register_principal(intruder.clone(), PrincipalKind::App, "tok-x")
            .unwrap();
        let tier = TierId::from("plant-a");
        sim.create_mdb(&owner, &tier, "asset").unwrap();
        assert_eq!(
            sim.create_mdb(&intruder, &tier, "rogue").unwrap_err().variant_name(),
            "Unauthorized"
        );
        assert_eq!(
            sim.create_mdb(&owner, &tier, "asset").unwrap_err().variant_name(),
            "DuplicateMdbName"
        );
        // Same name in another tier is a different microdatabase.
        sim.create_mdb(&owner, &TierId::from("local-1"), "asset").unwrap();
    }

    #[test]
    fn subscriptions_stay_in_tier() {
        let (mut sim, owner) = sim_with_tiers();
        let tier = TierId::from("plant-a");
        let mdb = sim.create_mdb(&owner, &tier, "asset").unwrap();
        sim.create_store(&owner, &mdb, StoreId::from("readings"), StoreKind::Timeseries)
            .unwrap();
        let err = sim
            .subscribe(
                &owner,
                &mdb,
                &StoreId::from("readings"),
                "*",
                HandlerRef::Callback {
                    tier: TierId::from("local-1"),
                    tag: "remote".to_string(),
                },
            )
            .unwrap_err();
        assert_eq!(err.variant_name(), "CrossTierSubscription");
    }

    #[test]
    fn pump_delivers_in_order_and_reaches_quiescence() {
        let (mut sim, owner) = sim_with_tiers();
        let tier = TierId::from("plant-a");
        let mdb = sim.create_mdb(&owner, &tier, "asset").unwrap();
        let store = StoreId::from("readings");
        sim.create_store(&owner, &mdb, store.clone(), StoreKind::Timeseries)
            .unwrap();

        let seen: Arc<std::sync::Mutex<Vec<(u64, String)>>> =
            Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let mdb2 = mdb.clone();
        let store2 = store.clone();
        sim.subscribe_callback(
            &owner,
            &mdb,
            &store,
            "raw/*",
            "escalate",
            Arc::new(move |sim, event| {
                seen2.lock().unwrap().push((event.event_id, event.key.clone()));
                // Handler writes back: derived key, same store.
                let owner = PrincipalId::from("utilA");
                sim.put(
                    &owner,
                    &mdb2,
                    &store2,
                    &event.key.replace("raw/", "derived/"),
                    event.ts,
                    Value::I64(1),
                )
                .map(|_| ())
                .map_err(|e| e.to_string())
            }),
        )
        .unwrap();

        sim.put(&owner, &mdb, &store, "raw/a", 1, Value::I64(0)).unwrap();
        sim.put(&owner, &mdb, &store, "raw/b", 2, Value::I64(0)).unwrap();
        let report = sim.pump();
        // 2 raw events delivered to the callback, plus 2 derived events
        // with no subscriber; all drained in one pump.
        assert_eq!(report.delivered, 4);
        assert_eq!(report.failed, 0);
        assert_eq!(
            *seen.lock().unwrap(),
            vec![(1, "raw/a".to_string()), (2, "raw/b".to_string())]
        );
        assert!(sim
            .mdb(&mdb)
            .unwrap()
            .store(&store)
            .unwrap()
            .get_live("derived/a", 1)
            .is_some());
        // Quiescent now.
        assert_eq!(sim.pump().delivered, 0);
    }

    #[test]
    fn revoked_subscriber_fails_at_delivery_time() {
        let (mut sim, owner) = sim_with_tiers();
        let tier = TierId::from("plant-a");
        let mdb = sim.create_mdb(&owner, &tier, "asset").unwrap();
        let store = StoreId::from("readings");
        sim.create_store(&owner, &mdb, store.clone(), StoreKind::Timeseries)
            .unwrap();
        let app = PrincipalId::from("app-1");
        sim.register_principal(app.clone(), PrincipalKind::App, "tok-app")
            .unwrap();
        sim.add_grant(
            &owner,
            &mdb,
            Grant {
                principal: app.clone(),
                selector: StoreSelector::One(store.clone()),
                rights: Rights::of(&[Action::Subscribe]),
            },
        )
        .unwrap();
        sim.subscribe_callback(
            &app,
            &mdb,
            &store,
            "*",
            "probe",
            Arc::new(|_, _| Ok(())),
        )
        .unwrap();
        sim.put(&owner, &mdb, &store, "k", 1, Value::I64(1)).unwrap();
        assert_eq!(sim.pump().failed, 0);

        // Revoke, then write again: the delivery-time re-check fails it.
        sim.revoke_grant(
            &owner,
            &mdb,
            &app,
            &StoreSelector::One(store.clone()),
            Rights::of(&[Action::Subscribe]),
        )
        .unwrap();
        sim.put(&owner, &mdb, &store, "k", 2, Value::I64(2)).unwrap();
        let report = sim.pump();
        assert_eq!(report.failed, 1);
        assert_eq!(sim.delivery_failures.len(), 1);
    }

    #[test]
    fn work_submit_validates_store_kind_and_route() {
        let (mut sim, owner) = sim_with_tiers();
        let plant = TierId::from("plant-a");
        let local = TierId::from("local-1");
        let m_plant = sim.create_mdb(&owner, &plant, "ops").unwrap();
        let m_local = sim.create_mdb(&owner, &local, "ops").unwrap();
        sim.create_store(&owner, &m_plant, StoreId::from("work"), StoreKind::Work)
            .unwrap();
        sim.create_store(&owner, &m_plant, StoreId::from("data"), StoreKind::Timeseries)
            .unwrap();
        sim.create_store(&owner, &m_local, StoreId::from("work"), StoreKind::Work)
            .unwrap();

        assert_eq!(
            sim.submit_work(
                &owner,
                &m_plant,
                &StoreId::from("data"),
                "r1",
                &local,
                "op",
                BTreeMap::new()
            )
            .unwrap_err()
            .variant_name(),
            "KindMismatch"
        );
        // No link yet: unreachable.
        assert_eq!(
            sim.submit_work(
                &owner,
                &m_plant,
                &StoreId::from("work"),
                "r1",
                &local,
                "op",
                BTreeMap::new()
            )
            .unwrap_err()
            .variant_name(),
            "UnreachableTarget"
        );
        sim.configure_link(
            &owner,
            LinkId::from("l1"),
            &m_plant,
            &m_local,
            FilterCriteria::default(),
        )
        .unwrap();
        sim.submit_work(
            &owner,
            &m_plant,
            &StoreId::from("work"),
            "r1",
            &local,
            "op",
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(
            sim.submit_work(
                &owner,
                &m_plant,
                &StoreId::from("work"),
                "r1",
                &local,
                "op",
                BTreeMap::new()
            )
            .unwrap_err()
            .variant_name(),
            "DuplicateRequest"
        );
        let status = sim
            .work_status(&owner, &m_plant, &StoreId::from("work"), "r1")
            .unwrap();
        assert_eq!(status.status, WorkStatus::Created);
    }

    #[test]
    fn cycle_syncs_links_and_skips_down_ones() {
        let (mut sim, owner) = sim_with_tiers();
        let plant = TierId::from("plant-a");
        let local = TierId::from("local-1");
        let m_plant = sim.create_mdb(&owner, &plant, "asset").unwrap();
        let m_local = sim.create_mdb(&owner, &local, "asset").unwrap();
        for m in [&m_plant, &m_local] {
            sim.create_store(&owner, m, StoreId::from("readings"), StoreKind::Timeseries)
                .unwrap();
            sim.set_policy_text(
                &owner,
                m,
                "policy share\nversion 2\nrule * both full\n",
            )
            .unwrap();
        }
        sim.configure_link(
            &owner,
            LinkId::from("l1"),
            &m_plant,
            &m_local,
            FilterCriteria::default(),
        )
        .unwrap();
        sim.put(&owner, &m_plant, &StoreId::from("readings"), "k", 1, Value::I64(5))
            .unwrap();
        let report = sim.run_cycle();
        assert_eq!(report.links.len(), 1);
        assert_eq!(report.links[0].forward_transferred, 1);
        assert!(sim
            .mdb(&m_local)
            .unwrap()
            .store(&StoreId::from("readings"))
            .unwrap()
            .get_live("k", 1)
            .is_some());

        sim.set_link_state(&plant, &local, LinkState::Down).unwrap();
        sim.put(&owner, &m_plant, &StoreId::from("readings"), "k", 2, Value::I64(6))
            .unwrap();
        let report = sim.run_cycle();
        assert_eq!(report.links[0].skipped.as_deref(), Some("LinkDown"));
        assert!(sim
            .mdb(&m_local)
            .unwrap()
            .store(&StoreId::from("readings"))
            .unwrap()
            .get_live("k", 2)
            .is_none());

        // Heal: next cycle catches up.
        sim.set_link_state(&plant, &local, LinkState::Up).unwrap();
        let report = sim.run_cycle();
        assert_eq!(report.links[0].forward_transferred, 1);
    }
}
