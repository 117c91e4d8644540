//! Policy-filtered replication between microdatabases.
//!
//! A link connects two microdatabases on adjacent tiers and syncs both
//! directions. Each direction keeps:
//!
//! * `log_pos`: how far into the sender's mutation log it has consumed.
//!   Candidates for a sync are the identities touched since then, so a
//!   chain of links forwards replicated records as readily as local ones.
//! * per-origin knowledge gating: a candidate whose (origin, origin_clock)
//!   the receiving store already knows is not sent again. This is what
//!   makes an immediate re-sync transfer nothing and stops echoes in
//!   cycles of links.
//! * downsample memory (`sent_buckets` / `sent_points`): which time
//!   buckets have shipped a raw record and which exact identities have
//!   crossed, so later updates and deletes to a shipped identity always
//!   pass while the rest of its bucket stays suppressed.
//!
//! Enforcement is two-sided: the sender's outbound rule picks the
//! transform (full, downsample, summarize, deny), then the receiver's
//! inbound rule gates what it accepts. A record rejected by the inbound
//! gate still advances the receiving store's knowledge: the refusal is
//! deliberate and must not cause endless re-offers.
//!
//! A sync direction runs in three phases so a link channel can sit in the
//! middle: plan against an immutable sender, encode and decode through
//! the wire format, then apply to the receiver. Direction state commits
//! only when the whole batch applied; an interrupted apply leaves
//! `log_pos` behind so the retry re-plans, and knowledge gating makes the
//! retry skip whatever already landed.

use crate::error::{Error, Result};
use crate::glob::glob_match;
use crate::ids::{LinkId, MdbId, ReplicaId, Seq, StoreId};
use crate::mdb::Microdatabase;
use crate::policy::{Aggregate, Flow, ShareMode};
use crate::record::{MergeDecision, Record};
use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

// ---------------------------------------------------------------------------
// Link structure

/// Static per-link selection, applied before policy in both directions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterCriteria {
    pub key_glob: Option<String>,
    /// Inclusive timestamp window.
    pub window: Option<(i64, i64)>,
}

impl FilterCriteria {
    pub fn validate(&self) -> Result<()> {
        if let Some((t0, t1)) = self.window {
            if t0 > t1 {
                return Err(Error::InvalidRange { t0, t1 });
            }
        }
        Ok(())
    }

    pub fn passes(&self, key: &str, ts: i64) -> bool {
        if let Some(glob) = &self.key_glob {
            if !glob_match(glob, key) {
                return false;
            }
        }
        if let Some((t0, t1)) = self.window {
            if ts < t0 || ts > t1 {
                return false;
            }
        }
        true
    }
}

/// Per-direction bookkeeping. `watermark` mirrors the receiver's
/// per-store knowledge as of the last completed sync; it only grows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionState {
    pub log_pos: Seq,
    pub watermark: BTreeMap<(StoreId, ReplicaId), u64>,
    /// (store, key, bucket) claimed by an outbound downsample.
    pub sent_buckets: BTreeSet<(StoreId, String, i64)>,
    /// (store, key, ts) identities that have crossed outbound.
    pub sent_points: BTreeSet<(StoreId, String, i64)>,
    /// Receiver-side claims for an inbound downsample rule.
    pub in_buckets: BTreeSet<(StoreId, String, i64)>,
    pub in_points: BTreeSet<(StoreId, String, i64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaLink {
    pub link_id: LinkId,
    pub a: MdbId,
    pub b: MdbId,
    pub filter: FilterCriteria,
    pub a_to_b: DirectionState,
    pub b_to_a: DirectionState,
}

impl ReplicaLink {
    pub fn new(link_id: LinkId, a: MdbId, b: MdbId, filter: FilterCriteria) -> ReplicaLink {
        ReplicaLink {
            link_id,
            a,
            b,
            filter,
            a_to_b: DirectionState::default(),
            b_to_a: DirectionState::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Planning (sender side)

#[derive(Debug, Clone)]
pub struct TransferPlan {
    /// Records to ship, ordered by (store, key, ts); summaries sit at
    /// their synthetic identities.
    pub records: Vec<(StoreId, Record)>,
    /// Indices into `records` of synthesized summaries.
    pub synthesized: BTreeSet<usize>,
    pub new_log_pos: Seq,
    pub claim_buckets: Vec<(StoreId, String, i64)>,
    pub claim_points: Vec<(StoreId, String, i64)>,
    pub candidates: usize,
    pub skipped_known: usize,
    pub skipped_filtered: usize,
    pub skipped_policy: usize,
    pub suppressed: usize,
}

fn bucket_of(ts: i64, interval_ms: i64) -> i64 {
    ts.div_euclid(interval_ms)
}

fn window_start(ts: i64, window_ms: i64) -> i64 {
    ts.div_euclid(window_ms) * window_ms
}

/// Phase 1: decide what this direction would send, without mutating
/// either side. Candidates come from the sender's mutation log after
/// `state.log_pos`; gating order is store presence, static filter, policy
/// deny, receiver knowledge, then the outbound transform.
pub fn plan_direction(
    sender: &Microdatabase,
    receiver: &Microdatabase,
    state: &DirectionState,
    filter: &FilterCriteria,
) -> TransferPlan {
    let mut plan = TransferPlan {
        records: Vec::new(),
        synthesized: BTreeSet::new(),
        new_log_pos: sender.log.head_seq(),
        claim_buckets: Vec::new(),
        claim_points: Vec::new(),
        candidates: 0,
        skipped_known: 0,
        skipped_filtered: 0,
        skipped_policy: 0,
        suppressed: 0,
    };

    let mut identities: BTreeSet<(StoreId, String, i64)> = BTreeSet::new();
    for entry in sender.log.entries_after(state.log_pos) {
        identities.insert((entry.store_id.clone(), entry.key.clone(), entry.ts));
    }
    plan.candidates = identities.len();

    // (store, base key, window start) -> candidate group for summarize.
    let mut summary_groups: BTreeSet<(StoreId, String, i64)> = BTreeSet::new();
    let mut summary_modes: BTreeMap<StoreId, (Aggregate, i64)> = BTreeMap::new();

    for (store_id, key, ts) in identities {
        if !receiver.has_store(&store_id) {
            plan.skipped_filtered += 1;
            continue;
        }
        if !filter.passes(&key, ts) {
            plan.skipped_filtered += 1;
            continue;
        }
        let outbound = sender.policy().rule_for(&store_id, Flow::Outbound).mode;
        let inbound = receiver.policy().rule_for(&store_id, Flow::Inbound).mode;
        if outbound == ShareMode::Deny || inbound == ShareMode::Deny {
            plan.skipped_policy += 1;
            continue;
        }
        let store = match sender.store(&store_id) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let Some(record) = store.get_any(&key, ts) else {
            // Purged since it was logged.
            continue;
        };
        match outbound {
            ShareMode::Deny => unreachable!("deny handled above"),
            ShareMode::Full => {
                if receiver_knows(receiver, &store_id, record) {
                    plan.skipped_known += 1;
                    continue;
                }
                plan.records.push((store_id, record.clone()));
            }
            ShareMode::Downsample { interval_ms } => {
                let point = (store_id.clone(), key.clone(), ts);
                if state.sent_points.contains(&point)
                    || plan.claim_points.contains(&point)
                {
                    // An identity that crossed once keeps flowing, so
                    // updates and deletes reach the other side.
                    if receiver_knows(receiver, &store_id, record) {
                        plan.skipped_known += 1;
                        continue;
                    }
                    plan.records.push((store_id, record.clone()));
                    continue;
                }
                if record.is_tombstone() {
                    // Deleting something that never crossed tells the
                    // receiver nothing; the bucket stays open.
                    plan.suppressed += 1;
                    continue;
                }
                let bucket = (store_id.clone(), key.clone(), bucket_of(ts, interval_ms));
                if state.sent_buckets.contains(&bucket) || plan.claim_buckets.contains(&bucket) {
                    plan.suppressed += 1;
                    continue;
                }
                if receiver_knows(receiver, &store_id, record) {
                    // Receiver got it some other way; the bucket is
                    // still served.
                    plan.skipped_known += 1;
                    plan.claim_buckets.push(bucket);
                    plan.claim_points.push(point);
                    continue;
                }
                plan.claim_buckets.push(bucket);
                plan.claim_points.push(point);
                plan.records.push((store_id, record.clone()));
            }
            ShareMode::Summarize { agg, window_ms } => {
                summary_modes.insert(store_id.clone(), (agg, window_ms));
                summary_groups.insert((store_id.clone(), key.clone(), window_start(ts, window_ms)));
            }
        }
    }

    // Synthesize one summary per touched (store, key, window).
    for (store_id, key, wstart) in summary_groups {
        let (agg, window_ms) = summary_modes[&store_id];
        let store = match sender.store(&store_id) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let in_window: Vec<&Record> = store
            .all_records()
            .filter(|r| r.key == key && r.ts >= wstart && r.ts < wstart + window_ms)
            .collect();
        if in_window.is_empty() {
            continue;
        }
        // Revision is the sum over every version in the window, deletes
        // included, so any source mutation strictly raises it and the
        // replacement summary wins last-writer-wins cleanly.
        let revision: u64 = in_window.iter().map(|r| r.revision).sum();
        let live: Vec<&Record> = in_window
            .iter()
            .copied()
            .filter(|r| !r.is_tombstone())
            .collect();
        let value = summarize_values(agg, &live);
        let summary = Record {
            key: format!("{key}.{}", agg.name()),
            ts: wstart,
            value,
            revision,
            // Fresh origin_clock assigned by stamp_synthesis.
            origin: sender.replica().clone(),
            origin_clock: 0,
        };
        plan.synthesized.insert(plan.records.len());
        plan.records.push((store_id, summary));
    }

    plan
}

fn receiver_knows(receiver: &Microdatabase, store_id: &StoreId, record: &Record) -> bool {
    receiver
        .store(store_id)
        .map(|s| s.knows(&record.origin, record.origin_clock))
        .unwrap_or(false)
}

/// Aggregate live values; `None` (a tombstone summary) when nothing
/// numeric is left in the window.
fn summarize_values(agg: Aggregate, live: &[&Record]) -> Option<Value> {
    if agg == Aggregate::Count {
        return Some(Value::I64(live.len() as i64));
    }
    let nums: Vec<f64> = live
        .iter()
        .filter_map(|r| r.value.as_ref().and_then(|v| v.as_f64()))
        .collect();
    if nums.is_empty() {
        return None;
    }
    let v = match agg {
        Aggregate::Mean => nums.iter().sum::<f64>() / nums.len() as f64,
        Aggregate::Min => nums.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregate::Max => nums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregate::Count => unreachable!(),
    };
    Some(Value::F64(v))
}

/// Phase 1b: give synthesized summaries real clock ticks from the sender
/// and note them in the sender's own knowledge, so a summary cannot echo
/// back into the store that invented it.
pub fn stamp_synthesis(sender: &mut Microdatabase, plan: &mut TransferPlan) {
    let indices: Vec<usize> = plan.synthesized.iter().copied().collect();
    for ix in indices {
        let clock = sender.next_clock();
        let (store_id, rec) = &mut plan.records[ix];
        rec.origin_clock = clock;
        let store_id = store_id.clone();
        let origin = rec.origin.clone();
        if let Ok(store) = sender.store_mut(&store_id) {
            store.note_knowledge(&origin, clock);
        }
    }
}

// ---------------------------------------------------------------------------
// Wire format

const MAX_BATCH_RECORDS: u32 = 1_000_000;

/// Encode a planned batch for the link channel. Layout, all integers
/// little-endian:
///
/// ```text
/// u32 group_count
/// per group:
///   u16 store_len, store bytes, u32 record_count
///   per record:
///     u16 key_len, key bytes, i64 ts, u64 revision,
///     u16 origin_len, origin bytes, u64 origin_clock,
///     u8 flags (bit0 = tombstone)
///     live records then carry u8 value_tag + payload:
///       0 f64 bits, 1 i64, 2 u32 len + utf8, 3 u8 bool, 4 u32 len + bytes
/// ```
pub fn encode_batch(records: &[(StoreId, Record)]) -> Vec<u8> {
    let mut groups: Vec<(&StoreId, Vec<&Record>)> = Vec::new();
    for (store_id, rec) in records {
        match groups.last_mut() {
            Some((sid, recs)) if *sid == store_id => recs.push(rec),
            _ => groups.push((store_id, vec![rec])),
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (store_id, recs) in groups {
        put_str16(&mut out, store_id.as_str());
        out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
        for rec in recs {
            put_str16(&mut out, &rec.key);
            out.extend_from_slice(&rec.ts.to_le_bytes());
            out.extend_from_slice(&rec.revision.to_le_bytes());
            put_str16(&mut out, rec.origin.as_str());
            out.extend_from_slice(&rec.origin_clock.to_le_bytes());
            match &rec.value {
                None => out.push(1u8),
                Some(v) => {
                    out.push(0u8);
                    match v {
                        Value::F64(x) => {
                            out.push(0);
                            out.extend_from_slice(&x.to_bits().to_le_bytes());
                        }
                        Value::I64(x) => {
                            out.push(1);
                            out.extend_from_slice(&x.to_le_bytes());
                        }
                        Value::Str(s) => {
                            out.push(2);
                            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                            out.extend_from_slice(s.as_bytes());
                        }
                        Value::Bool(b) => {
                            out.push(3);
                            out.push(*b as u8);
                        }
                        Value::Bytes(bs) => {
                            out.push(4);
                            out.extend_from_slice(&(bs.len() as u32).to_le_bytes());
                            out.extend_from_slice(bs);
                        }
                    }
                }
            }
        }
    }
    out
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    debug_assert!(s.len() <= u16::MAX as usize, "identifier too long for wire");
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedBatch(format!(
                "truncated at byte {} needing {n}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::MalformedBatch("invalid utf8 in identifier".to_string()))
    }
}

pub fn decode_batch(bytes: &[u8]) -> Result<Vec<(StoreId, Record)>> {
    let mut c = Cursor { bytes, pos: 0 };
    let group_count = c.u32()?;
    if group_count > MAX_BATCH_RECORDS {
        return Err(Error::MalformedBatch(format!(
            "implausible group count {group_count}"
        )));
    }
    let mut out = Vec::new();
    for _ in 0..group_count {
        let store_id = StoreId::from(c.str16()?);
        let record_count = c.u32()?;
        if record_count > MAX_BATCH_RECORDS {
            return Err(Error::MalformedBatch(format!(
                "implausible record count {record_count}"
            )));
        }
        for _ in 0..record_count {
            let key = c.str16()?;
            let ts = c.i64()?;
            let revision = c.u64()?;
            let origin = ReplicaId::from(c.str16()?);
            let origin_clock = c.u64()?;
            let flags = c.u8()?;
            if flags > 1 {
                return Err(Error::MalformedBatch(format!("unknown flags {flags:#04x}")));
            }
            let value = if flags & 1 == 1 {
                None
            } else {
                let tag = c.u8()?;
                Some(match tag {
                    0 => Value::F64(f64::from_bits(c.u64()?)),
                    1 => Value::I64(c.i64()?),
                    2 => {
                        let len = c.u32()? as usize;
                        let b = c.take(len)?;
                        Value::Str(String::from_utf8(b.to_vec()).map_err(|_| {
                            Error::MalformedBatch("invalid utf8 in string value".to_string())
                        })?)
                    }
                    3 => Value::Bool(c.u8()? != 0),
                    4 => {
                        let len = c.u32()? as usize;
                        Value::Bytes(c.take(len)?.to_vec())
                    }
                    other => {
                        return Err(Error::MalformedBatch(format!("unknown value tag {other}")));
                    }
                })
            };
            out.push((
                store_id.clone(),
                Record {
                    key,
                    ts,
                    value,
                    revision,
                    origin,
                    origin_clock,
                },
            ));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::MalformedBatch(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Apply (receiver side)

/// One record's outcome on the receiving side, for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub store: StoreId,
    pub key: String,
    pub ts: i64,
    pub revision: u64,
    pub origin: ReplicaId,
    pub origin_clock: u64,
    pub synthesized: bool,
    pub applied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub from: MdbId,
    pub to: MdbId,
    pub candidates: usize,
    pub transferred: usize,
    pub applied: usize,
    pub kept_local: usize,
    pub identical: usize,
    pub skipped_known: usize,
    pub skipped_filtered: usize,
    pub skipped_policy: usize,
    pub suppressed: usize,
    pub inbound_filtered: usize,
    pub interrupted: bool,
    pub transfers: Vec<TransferRecord>,
}

/// Phase 3: apply a decoded batch to the receiver under its inbound
/// rules, then commit direction state if the whole batch landed.
pub fn apply_direction(
    receiver: &mut Microdatabase,
    state: &mut DirectionState,
    batch: Vec<(StoreId, Record)>,
    plan: &TransferPlan,
    interrupt_after: Option<usize>,
) -> Result<DirectionReport> {
    let mut report = DirectionReport {
        from: MdbId::from(""),
        to: receiver.id.clone(),
        candidates: plan.candidates,
        transferred: batch.len(),
        skipped_known: plan.skipped_known,
        skipped_filtered: plan.skipped_filtered,
        skipped_policy: plan.skipped_policy,
        suppressed: plan.suppressed,
        ..DirectionReport::default()
    };

    let synthesized_ids: BTreeSet<(StoreId, String, i64)> = plan
        .synthesized
        .iter()
        .map(|&ix| {
            let (sid, r) = &plan.records[ix];
            (sid.clone(), r.key.clone(), r.ts)
        })
        .collect();

    for (applied_count, (store_id, rec)) in batch.into_iter().enumerate() {
        if interrupt_after == Some(applied_count) {
            report.interrupted = true;
            return Ok(report);
        }
        let inbound = receiver.policy().rule_for(&store_id, Flow::Inbound).mode;
        let accept = match inbound {
            ShareMode::Deny => false,
            ShareMode::Full => true,
            ShareMode::Downsample { interval_ms } => {
                let point = (store_id.clone(), rec.key.clone(), rec.ts);
                if state.in_points.contains(&point) {
                    true
                } else if rec.is_tombstone() {
                    false
                } else {
                    let bucket =
                        (store_id.clone(), rec.key.clone(), bucket_of(rec.ts, interval_ms));
                    if state.in_buckets.contains(&bucket) {
                        false
                    } else {
                        state.in_buckets.insert(bucket);
                        state.in_points.insert(point);
                        true
                    }
                }
            }
            // Best effort for an inbound summarize: accept only records
            // shaped like summaries at this window granularity.
            ShareMode::Summarize { agg, window_ms } => {
                rec.key.ends_with(&format!(".{}", agg.name()))
                    && rec.ts == window_start(rec.ts, window_ms)
            }
        };
        if !accept {
            report.inbound_filtered += 1;
            // A deliberate refusal: remember the version so it is not
            // offered forever.
            if let Ok(store) = receiver.store_mut(&store_id) {
                store.note_knowledge(&rec.origin, rec.origin_clock);
            }
            continue;
        }
        let synthesized =
            synthesized_ids.contains(&(store_id.clone(), rec.key.clone(), rec.ts));
        let outcome = receiver.apply_replicated(&store_id, &rec)?;
        match outcome.decision {
            MergeDecision::TakeAbsent | MergeDecision::TakeIncoming => report.applied += 1,
            MergeDecision::KeepLocal => report.kept_local += 1,
            MergeDecision::Identical => report.identical += 1,
        }
        report.transfers.push(TransferRecord {
            store: store_id,
            key: rec.key.clone(),
            ts: rec.ts,
            revision: rec.revision,
            origin: rec.origin.clone(),
            origin_clock: rec.origin_clock,
            synthesized,
            applied: outcome.decision.applies(),
        });
    }

    // Whole batch landed: commit the direction state.
    state.log_pos = plan.new_log_pos;
    for b in &plan.claim_buckets {
        state.sent_buckets.insert(b.clone());
    }
    for p in &plan.claim_points {
        state.sent_points.insert(p.clone());
    }
    for store in receiver.stores() {
        for (origin, clock) in store.knowledge() {
            let entry = state
                .watermark
                .entry((store.id.clone(), origin.clone()))
                .or_insert(0);
            if *clock > *entry {
                *entry = *clock;
            }
        }
    }
    Ok(report)
}

/// Convenience for tests and in-process sync: run one direction end to
/// end between two microdatabases the caller holds.
pub fn sync_direction(
    sender: &mut Microdatabase,
    receiver: &mut Microdatabase,
    state: &mut DirectionState,
    filter: &FilterCriteria,
    interrupt_after: Option<usize>,
) -> Result<DirectionReport> {
    let mut plan = plan_direction(sender, receiver, state, filter);
    stamp_synthesis(sender, &mut plan);
    let bytes = encode_batch(&plan.records);
    let batch = decode_batch(&bytes)?;
    let mut report = apply_direction(receiver, state, batch, &plan, interrupt_after)?;
    report.from = sender.id.clone();
    Ok(report)
}
