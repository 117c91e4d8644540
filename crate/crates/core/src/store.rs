//! Column stores and the per-microdatabase mutation log.
//!
//! A store holds records ordered by (key, ts) in a BTreeMap so every
//! iteration is deterministic. Reads hide tombstones; replication sees
//! them. Each store also tracks a knowledge vector: the highest
//! origin_clock it has ever been offered per origin replica. The vector is
//! monotone and deliberately survives purging, which is what prevents a
//! peer from resurrecting records that retention already removed.

use crate::error::{Error, Result};
use crate::glob::glob_match;
use crate::ids::{ReplicaId, Seq, StoreId};
use crate::record::{merge, MergeDecision, Record};
use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StoreKind {
    Timeseries,
    Work,
    Config,
}

impl StoreKind {
    pub fn name(&self) -> &'static str {
        match self {
            StoreKind::Timeseries => "timeseries",
            StoreKind::Work => "work",
            StoreKind::Config => "config",
        }
    }

    pub fn parse(s: &str) -> Result<StoreKind> {
        match s {
            "timeseries" => Ok(StoreKind::Timeseries),
            "work" => Ok(StoreKind::Work),
            "config" => Ok(StoreKind::Config),
            other => Err(Error::KindMismatch(format!("unknown store kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnStore {
    pub id: StoreId,
    pub kind: StoreKind,
    records: BTreeMap<(String, i64), Record>,
    knowledge: BTreeMap<ReplicaId, u64>,
}

/// What applying a replicated record did to the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApplyOutcome {
    pub decision: MergeDecision,
}

impl ColumnStore {
    pub fn new(id: StoreId, kind: StoreKind) -> Self {
        ColumnStore {
            id,
            kind,
            records: BTreeMap::new(),
            knowledge: BTreeMap::new(),
        }
    }

    /// Record at this exact identity, tombstone or live.
    pub fn get_any(&self, key: &str, ts: i64) -> Option<&Record> {
        self.records.get(&(key.to_string(), ts))
    }

    /// Live record at this exact identity.
    pub fn get_live(&self, key: &str, ts: i64) -> Option<&Record> {
        self.get_any(key, ts).filter(|r| !r.is_tombstone())
    }

    /// Local write. Assigns revision (previous + 1, or 1) and stamps the
    /// record with this replica's identity and clock tick.
    pub fn put_local(
        &mut self,
        key: &str,
        ts: i64,
        value: Option<Value>,
        origin: &ReplicaId,
        origin_clock: u64,
    ) -> Record {
        let prev_rev = self
            .get_any(key, ts)
            .map(|r| r.revision)
            .unwrap_or(0);
        let rec = Record {
            key: key.to_string(),
            ts,
            value,
            revision: prev_rev + 1,
            origin: origin.clone(),
            origin_clock,
        };
        self.note_knowledge(origin, origin_clock);
        self.records.insert((key.to_string(), ts), rec.clone());
        rec
    }

    /// Apply a record that arrived through replication, by the merge rule.
    /// Knowledge advances whether or not the record wins.
    pub fn apply_replicated(&mut self, incoming: &Record) -> ApplyOutcome {
        self.note_knowledge(&incoming.origin.clone(), incoming.origin_clock);
        let decision = merge(self.get_any(&incoming.key, incoming.ts), incoming);
        if decision.applies() {
            self.records
                .insert((incoming.key.clone(), incoming.ts), incoming.clone());
        }
        ApplyOutcome { decision }
    }

    /// Live records with keys matching `key_glob` and ts in `[t0, t1]`,
    /// ordered by (key, ts).
    pub fn range(&self, key_glob: &str, t0: i64, t1: i64) -> Result<Vec<&Record>> {
        if t0 > t1 {
            return Err(Error::InvalidRange { t0, t1 });
        }
        Ok(self
            .records
            .values()
            .filter(|r| !r.is_tombstone() && r.ts >= t0 && r.ts <= t1 && glob_match(key_glob, &r.key))
            .collect())
    }

    /// Every record including tombstones, in (key, ts) order.
    pub fn all_records(&self) -> impl Iterator<Item = &Record> {
        self.records.values()
    }

    /// Latest live record per key (among keys matching the glob) with
    /// ts <= as_of, ordered by key.
    pub fn latest_per_key(&self, key_glob: &str, as_of: i64) -> Vec<&Record> {
        let mut best: BTreeMap<&str, &Record> = BTreeMap::new();
        for r in self.records.values() {
            if r.is_tombstone() || r.ts > as_of || !glob_match(key_glob, &r.key) {
                continue;
            }
            match best.get(r.key.as_str()) {
                Some(prev) if prev.ts >= r.ts => {}
                _ => {
                    best.insert(r.key.as_str(), r);
                }
            }
        }
        best.into_values().collect()
    }

    pub fn note_knowledge(&mut self, origin: &ReplicaId, clock: u64) {
        let entry = self.knowledge.entry(origin.clone()).or_insert(0);
        if clock > *entry {
            *entry = clock;
        }
    }

    pub fn knows(&self, origin: &ReplicaId, clock: u64) -> bool {
        self.knowledge.get(origin).is_some_and(|&c| c >= clock)
    }

    pub fn knowledge(&self) -> &BTreeMap<ReplicaId, u64> {
        &self.knowledge
    }

    /// Drop records (live and tombstoned) with ts strictly older than
    /// `horizon`. Knowledge is untouched. Returns the purged identities.
    pub fn purge_older_than(&mut self, horizon: i64) -> Vec<(String, i64)> {
        let doomed: Vec<(String, i64)> = self
            .records
            .keys()
            .filter(|(_, ts)| *ts < horizon)
            .cloned()
            .collect();
        for k in &doomed {
            self.records.remove(k);
        }
        doomed
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Canonical text digest of the full store contents, used for
    /// convergence comparisons. Byte-identical iff the stores hold
    /// identical record sets.
    pub fn canonical_state(&self) -> String {
        let mut out = String::new();
        for r in self.records.values() {
            out.push_str(&r.canonical_line());
            out.push('\n');
        }
        out
    }
}

/// One entry per mutation applied to a microdatabase, local or replicated,
/// in application order. Sync scans it incrementally per link direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationLogEntry {
    pub seq: Seq,
    pub store_id: StoreId,
    pub key: String,
    pub ts: i64,
    pub revision: u64,
    pub origin: ReplicaId,
    pub origin_clock: u64,
    pub tombstone: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MutationLog {
    entries: Vec<MutationLogEntry>,
    /// Sequence of the first retained entry; earlier entries were
    /// compacted away after retention purges.
    base_seq: Seq,
    next_seq: Seq,
}

impl MutationLog {
    pub fn new() -> Self {
        MutationLog {
            entries: Vec::new(),
            base_seq: 1,
            next_seq: 1,
        }
    }

    pub fn append(&mut self, store_id: &StoreId, rec: &Record) -> Seq {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push(MutationLogEntry {
            seq,
            store_id: store_id.clone(),
            key: rec.key.clone(),
            ts: rec.ts,
            revision: rec.revision,
            origin: rec.origin.clone(),
            origin_clock: rec.origin_clock,
            tombstone: rec.is_tombstone(),
        });
        seq
    }

    /// Entries with seq strictly greater than `after`.
    pub fn entries_after(&self, after: Seq) -> &[MutationLogEntry] {
        let start = if after < self.base_seq {
            0
        } else {
            // Entries are dense by seq within the retained window.
            (after - self.base_seq + 1) as usize
        };
        if start >= self.entries.len() {
            &[]
        } else {
            &self.entries[start..]
        }
    }

    pub fn head_seq(&self) -> Seq {
        self.next_seq - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Compact entries for identities purged by retention. Only the dense
    /// prefix can be dropped (the log stays dense by seq); entries inside
    /// the retained window that refer to purged identities are kept but
    /// resolve to nothing when sync looks the record up.
    pub fn compact_purged(&mut self, purged: &std::collections::BTreeSet<(StoreId, String, i64)>) {
        let mut drop = 0;
        for e in &self.entries {
            if purged.contains(&(e.store_id.clone(), e.key.clone(), e.ts)) {
                drop += 1;
            } else {
                break;
            }
        }
        if drop > 0 {
            self.entries.drain(..drop);
            self.base_seq += drop as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ColumnStore {
        ColumnStore::new(StoreId::from("readings"), StoreKind::Timeseries)
    }

    fn replica(s: &str) -> ReplicaId {
        ReplicaId::from(s)
    }

    #[test]
    fn put_assigns_revisions_and_overwrites() {
        let mut s = store();
        let r1 = s.put_local("k", 10, Some(Value::F64(1.0)), &replica("t/a"), 1);
        assert_eq!(r1.revision, 1);
        let r2 = s.put_local("k", 10, Some(Value::F64(2.0)), &replica("t/a"), 2);
        assert_eq!(r2.revision, 2);
        assert_eq!(
            s.get_live("k", 10).unwrap().value,
            Some(Value::F64(2.0))
        );
        // Same key, different ts is a distinct record.
        let r3 = s.put_local("k", 11, Some(Value::F64(3.0)), &replica("t/a"), 3);
        assert_eq!(r3.revision, 1);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn tombstone_keeps_identity_and_hides_value() {
        let mut s = store();
        s.put_local("k", 10, Some(Value::F64(1.0)), &replica("t/a"), 1);
        let t = s.put_local("k", 10, None, &replica("t/a"), 2);
        assert_eq!(t.revision, 2);
        assert!(t.is_tombstone());
        assert!(s.get_live("k", 10).is_none());
        assert!(s.get_any("k", 10).unwrap().is_tombstone());
        // Reads skip it.
        assert!(s.range("*", 0, 100).unwrap().is_empty());
    }

    #[test]
    fn range_rejects_inverted_window() {
        let s = store();
        assert_eq!(
            s.range("*", 10, 5).unwrap_err(),
            Error::InvalidRange { t0: 10, t1: 5 }
        );
    }

    /// Oracle check: range against an independently written linear scan
    /// with the recursive reference matcher, over a seeded workload.
    #[test]
    fn range_matches_linear_scan_oracle() {
        fn naive_glob(p: &[char], t: &[char]) -> bool {
            match (p.first(), t.first()) {
                (None, None) => true,
                (Some('*'), _) => {
                    naive_glob(&p[1..], t) || (!t.is_empty() && naive_glob(p, &t[1..]))
                }
                (Some('?'), Some(_)) => naive_glob(&p[1..], &t[1..]),
                (Some(c), Some(d)) if c == d => naive_glob(&p[1..], &t[1..]),
                _ => false,
            }
        }

        let mut state = 7u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };

        for _case in 0..50 {
            let mut s = store();
            // Shadow copy of every write, tombstones included.
            let mut shadow: Vec<(String, i64, bool)> = Vec::new();
            let keys = ["TX-1/a", "TX-2/a", "TX-11/b", "C/x"];
            for i in 0..60 {
                let key = keys[(next() % 4) as usize];
                let ts = (next() % 50) as i64;
                let tomb = next() % 5 == 0;
                let val = if tomb { None } else { Some(Value::F64(i as f64)) };
                s.put_local(key, ts, val, &replica("t/a"), i + 1);
                shadow.retain(|(k, t, _)| !(k == key && *t == ts));
                shadow.push((key.to_string(), ts, tomb));
            }
            for pattern in ["*", "TX-*", "TX-?/a", "C/x", "*/b"] {
                let t0 = (next() % 30) as i64;
                let t1 = t0 + (next() % 30) as i64;
                let got: Vec<(String, i64)> = s
                    .range(pattern, t0, t1)
                    .unwrap()
                    .iter()
                    .map(|r| (r.key.clone(), r.ts))
                    .collect();
                let mut want: Vec<(String, i64)> = shadow
                    .iter()
                    .filter(|(k, ts, tomb)| {
                        !tomb
                            && *ts >= t0
                            && *ts <= t1
                            && naive_glob(
                                &pattern.chars().collect::<Vec<_>>(),
                                &k.chars().collect::<Vec<_>>(),
                            )
                    })
                    .map(|(k, ts, _)| (k.clone(), *ts))
                    .collect();
                want.sort();
                assert_eq!(got, want, "pattern {pattern:?} window {t0}..{t1}");
            }
        }
    }

    #[test]
    fn knowledge_is_monotone_and_survives_purge() {
        let mut s = store();
        s.put_local("k", 10, Some(Value::F64(1.0)), &replica("t/a"), 5);
        assert!(s.knows(&replica("t/a"), 5));
        assert!(!s.knows(&replica("t/a"), 6));
        s.note_knowledge(&replica("t/a"), 3); // lower clock: no effect
        assert!(s.knows(&replica("t/a"), 5));
        s.purge_older_than(100);
        assert_eq!(s.len(), 0);
        assert!(s.knows(&replica("t/a"), 5));
    }

    #[test]
    fn apply_replicated_respects_merge_and_knowledge() {
        let mut s = store();
        s.put_local("k", 10, Some(Value::F64(1.0)), &replica("t1/a"), 1);
        let incoming = Record {
            key: "k".into(),
            ts: 10,
            value: Some(Value::F64(9.0)),
            revision: 1,
            origin: replica("t2/b"),
            origin_clock: 4,
        };
        // t2/b sorts above t1/a: incoming wins the revision tie.
        let out = s.apply_replicated(&incoming);
        assert_eq!(out.decision, MergeDecision::TakeIncoming);
        assert_eq!(s.get_live("k", 10).unwrap().origin, replica("t2/b"));
        assert!(s.knows(&replica("t2/b"), 4));

        // A losing record still advances knowledge.
        let stale = Record {
            revision: 1,
            origin: replica("t0/z"),
            origin_clock: 7,
            ..incoming.clone()
        };
        let out = s.apply_replicated(&stale);
        assert_eq!(out.decision, MergeDecision::KeepLocal);
        assert!(s.knows(&replica("t0/z"), 7));
        assert_eq!(s.get_live("k", 10).unwrap().origin, replica("t2/b"));
    }

    #[test]
    fn log_entries_after_and_compaction() {
        let mut log = MutationLog::new();
        let sid = StoreId::from("s");
        let mk = |key: &str, ts: i64, clock: u64| Record {
            key: key.into(),
            ts,
            value: Some(Value::I64(1)),
            revision: 1,
            origin: ReplicaId::from("t/a"),
            origin_clock: clock,
        };
        log.append(&sid, &mk("a", 1, 1));
        log.append(&sid, &mk("b", 2, 2));
        log.append(&sid, &mk("c", 3, 3));
        assert_eq!(log.entries_after(0).len(), 3);
        assert_eq!(log.entries_after(2).len(), 1);
        assert_eq!(log.entries_after(3).len(), 0);

        let purged: std::collections::BTreeSet<_> =
            [(sid.clone(), "a".to_string(), 1i64)].into_iter().collect();
        log.compact_purged(&purged);
        assert_eq!(log.len(), 2);
        // Seq numbering is preserved: asking after seq 1 still yields b, c.
        assert_eq!(log.entries_after(1).len(), 2);
        assert_eq!(log.entries_after(2).len(), 1);
    }
}
