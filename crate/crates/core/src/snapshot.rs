//! Line-oriented snapshot of a whole simulation: tiers, links, and every
//! record in every store, in one deterministic text form.
//!
//! The format is the inspection surface of the system. It renders stably
//! (sorted maps all the way down) so two runs of the same scenario can be
//! compared byte for byte, and it parses back so tools can consume it.
//! Work-kind stores render decoded request lines when the stored payload
//! is exactly what our encoder produces; anything else falls back to the
//! raw record form.

use crate::error::{Error, Result};
use crate::ids::{CanonicalId, LinkId, MdbId, PrincipalId, ReplicaId, StoreId, TierId};
use crate::record::Record;
use crate::runtime::{Simulation, TierLevel};
use crate::store::StoreKind;
use crate::value::{quote_if_needed, unquote, Value};
use crate::version::Version;
use crate::work::{WorkRequest, WorkStatus};
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const SNAPSHOT_HEADER: &str = "snapshot v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub clock_ms: i64,
    pub cycle: u64,
    pub tiers: Vec<TierLine>,
    pub aliases: Vec<AliasLine>,
    pub links: Vec<LinkLine>,
    pub mdbs: Vec<MdbBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierLine {
    pub id: TierId,
    pub level: TierLevel,
    pub owner: PrincipalId,
    pub version: Version,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AliasLine {
    pub tier: TierId,
    pub scheme: String,
    pub value: String,
    pub canonical: CanonicalId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkLine {
    pub id: LinkId,
    pub a: MdbId,
    pub b: MdbId,
    pub glob: Option<String>,
    pub window: Option<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdbBlock {
    pub id: MdbId,
    pub owner: PrincipalId,
    pub policy_id: String,
    pub policy_version: u64,
    pub stores: Vec<StoreBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreBlock {
    pub id: StoreId,
    pub kind: StoreKind,
    pub lines: Vec<RecordLine>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordLine {
    Plain(Record),
    Work {
        ts: i64,
        revision: u64,
        origin: ReplicaId,
        origin_clock: u64,
        request: WorkRequest,
    },
}

// ---------------------------------------------------------------------------
// Render

/// Render the full simulation state.
pub fn render(sim: &Simulation) -> String {
    capture(sim).render()
}

/// Capture the simulation into the structured snapshot form.
pub fn capture(sim: &Simulation) -> Snapshot {
    let mut snap = Snapshot {
        clock_ms: sim.clock_ms,
        cycle: sim.cycle,
        tiers: Vec::new(),
        aliases: Vec::new(),
        links: Vec::new(),
        mdbs: Vec::new(),
    };
    for tier_id in sim.tier_ids() {
        let tier = sim.tier(&tier_id).expect("listed");
        snap.tiers.push(TierLine {
            id: tier.id.clone(),
            level: tier.level,
            owner: tier.owner.clone(),
            version: tier.platform_version,
        });
        for (scheme, value, canonical) in tier.aliases.entries() {
            snap.aliases.push(AliasLine {
                tier: tier.id.clone(),
                scheme: scheme.to_string(),
                value: value.to_string(),
                canonical: canonical.clone(),
            });
        }
    }
    for link_id in sim.link_ids() {
        let link = sim.link(&link_id).expect("listed");
        snap.links.push(LinkLine {
            id: link.link_id.clone(),
            a: link.a.clone(),
            b: link.b.clone(),
            glob: link.filter.key_glob.clone(),
            window: link.filter.window,
        });
    }
    for mdb_id in sim.mdb_ids() {
        let mdb = sim.mdb(&mdb_id).expect("listed");
        let mut block = MdbBlock {
            id: mdb.id.clone(),
            owner: mdb.owner.clone(),
            policy_id: mdb.policy().policy_id.clone(),
            policy_version: mdb.policy().version,
            stores: Vec::new(),
        };
        for store in mdb.stores() {
            let mut sb = StoreBlock {
                id: store.id.clone(),
                kind: store.kind,
                lines: Vec::new(),
            };
            for rec in store.all_records() {
                sb.lines.push(record_line(store.kind, rec));
            }
            block.stores.push(sb);
        }
        snap.mdbs.push(block);
    }
    snap
}

/// A work record renders decoded only when re-encoding reproduces the
/// stored bytes and the line stays parseable; otherwise the raw form.
fn record_line(kind: StoreKind, rec: &Record) -> RecordLine {
    if kind == StoreKind::Work {
        if let Some(value) = &rec.value {
            if let Ok(req) = WorkRequest::decode(value) {
                let faithful = req.encode() == *value
                    && req.params.keys().all(|k| crate::value::is_bare(k))
                    && keys_bare_in_status(&req.status);
                if faithful {
                    return RecordLine::Work {
                        ts: rec.ts,
                        revision: rec.revision,
                        origin: rec.origin.clone(),
                        origin_clock: rec.origin_clock,
                        request: req,
                    };
                }
            }
        }
    }
    RecordLine::Plain(rec.clone())
}

fn keys_bare_in_status(status: &WorkStatus) -> bool {
    match status {
        WorkStatus::Completed { result } => result.keys().all(|k| crate::value::is_bare(k)),
        _ => true,
    }
}

impl Snapshot {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "{SNAPSHOT_HEADER}");
        let _ = writeln!(w, "clock {}", self.clock_ms);
        let _ = writeln!(w, "cycle {}", self.cycle);
        for t in &self.tiers {
            let _ = writeln!(
                w,
                "tier {} {} owner={} version={}",
                t.id,
                t.level.name(),
                t.owner,
                t.version
            );
        }
        for a in &self.aliases {
            let _ = writeln!(
                w,
                "alias {} {} {} {}",
                a.tier,
                quote_if_needed(&a.scheme),
                quote_if_needed(&a.value),
                a.canonical
            );
        }
        for l in &self.links {
            let glob = match &l.glob {
                Some(g) => format!(" glob={}", quote_if_needed(g)),
                None => String::new(),
            };
            let window = match l.window {
                Some((t0, t1)) => format!(" window={t0}..{t1}"),
                None => String::new(),
            };
            let _ = writeln!(w, "link {} {} {}{glob}{window}", l.id, l.a, l.b);
        }
        for m in &self.mdbs {
            let _ = writeln!(
                w,
                "mdb {} owner={} policy={} policy-version={}",
                m.id,
                m.owner,
                quote_if_needed(&m.policy_id),
                m.policy_version
            );
            for s in &m.stores {
                let _ = writeln!(w, "store {} {}", s.id, s.kind.name());
                for line in &s.lines {
                    match line {
                        RecordLine::Plain(rec) => {
                            let _ = writeln!(w, "{}", rec.canonical_line());
                        }
                        RecordLine::Work {
                            ts,
                            revision,
                            origin,
                            origin_clock,
                            request,
                        } => {
                            let _ = write!(
                                w,
                                "workreq {} {} rev={} origin={} clock={} op={} from={} to={} status={}",
                                quote_if_needed(request.request_id.as_str()),
                                ts,
                                revision,
                                origin,
                                origin_clock,
                                quote_if_needed(&request.operation),
                                request.requester_tier,
                                request.target_tier,
                                request.status.name()
                            );
                            if let WorkStatus::Failed { reason } = &request.status {
                                let _ = write!(w, " reason={}", quote_if_needed(reason));
                            }
                            for (k, v) in &request.params {
                                let _ = write!(w, " param.{k}={}", v.canonical_text());
                            }
                            if let WorkStatus::Completed { result } = &request.status {
                                for (k, v) in result {
                                    let _ = write!(w, " result.{k}={}", v.canonical_text());
                                }
                            }
                            let _ = writeln!(w);
                        }
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Parse

/// Split a line into whitespace-separated tokens, keeping quoted spans
/// (with their quotes and escapes) inside one token.
fn split_tokens(line: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut escaped = false;
    for c in line.chars() {
        if escaped {
            cur.push(c);
            escaped = false;
            continue;
        }
        match c {
            '\\' if in_quotes => {
                cur.push(c);
                escaped = true;
            }
            '"' => {
                cur.push(c);
                in_quotes = !in_quotes;
            }
            c if c.is_whitespace() && !in_quotes => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if in_quotes {
        return Err(Error::InvalidValue(format!("unterminated quote in {line:?}")));
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    Ok(tokens)
}

fn field<'a>(token: &'a str, name: &str, line_no: usize) -> Result<&'a str> {
    let prefix = format!("{name}=");
    token.strip_prefix(&prefix).ok_or_else(|| {
        Error::InvalidValue(format!("line {line_no}: expected {name}=..., got {token:?}"))
    })
}

fn parse_i64(s: &str, what: &str, line_no: usize) -> Result<i64> {
    s.parse()
        .map_err(|_| Error::InvalidValue(format!("line {line_no}: bad {what} {s:?}")))
}

fn parse_u64(s: &str, what: &str, line_no: usize) -> Result<u64> {
    s.parse()
        .map_err(|_| Error::InvalidValue(format!("line {line_no}: bad {what} {s:?}")))
}

fn parse_kind(s: &str, line_no: usize) -> Result<StoreKind> {
    match s {
        "timeseries" => Ok(StoreKind::Timeseries),
        "work" => Ok(StoreKind::Work),
        "config" => Ok(StoreKind::Config),
        other => Err(Error::InvalidValue(format!(
            "line {line_no}: unknown store kind {other:?}"
        ))),
    }
}

/// Parse canonical record text as produced by `Record::canonical_line`.
fn parse_record_tokens(tokens: &[String], line_no: usize) -> Result<Record> {
    if tokens.len() != 7 {
        return Err(Error::InvalidValue(format!(
            "line {line_no}: record wants 7 tokens, got {}",
            tokens.len()
        )));
    }
    let key = unquote(&tokens[1])?;
    let ts = parse_i64(&tokens[2], "ts", line_no)?;
    let revision = parse_u64(field(&tokens[3], "rev", line_no)?, "rev", line_no)?;
    let origin = ReplicaId::from(field(&tokens[4], "origin", line_no)?);
    let origin_clock = parse_u64(field(&tokens[5], "clock", line_no)?, "clock", line_no)?;
    let value = if tokens[6] == "tombstone" {
        None
    } else {
        Some(Value::parse_canonical(&tokens[6])?)
    };
    Ok(Record {
        key,
        ts,
        value,
        revision,
        origin,
        origin_clock,
    })
}

fn parse_work_tokens(tokens: &[String], line_no: usize) -> Result<RecordLine> {
    if tokens.len() < 10 {
        return Err(Error::InvalidValue(format!(
            "line {line_no}: workreq wants at least 10 tokens"
        )));
    }
    let key = unquote(&tokens[1])?;
    let ts = parse_i64(&tokens[2], "ts", line_no)?;
    let revision = parse_u64(field(&tokens[3], "rev", line_no)?, "rev", line_no)?;
    let origin = ReplicaId::from(field(&tokens[4], "origin", line_no)?);
    let origin_clock = parse_u64(field(&tokens[5], "clock", line_no)?, "clock", line_no)?;
    let operation = unquote(field(&tokens[6], "op", line_no)?)?;
    let requester_tier = TierId::from(field(&tokens[7], "from", line_no)?);
    let target_tier = TierId::from(field(&tokens[8], "to", line_no)?);
    let status_name = field(&tokens[9], "status", line_no)?.to_string();

    let mut reason: Option<String> = None;
    let mut params = BTreeMap::new();
    let mut result = BTreeMap::new();
    for token in &tokens[10..] {
        if let Some(rest) = token.strip_prefix("reason=") {
            reason = Some(unquote(rest)?);
        } else if let Some(rest) = token.strip_prefix("param.") {
            let (k, v) = rest.split_once('=').ok_or_else(|| {
                Error::InvalidValue(format!("line {line_no}: bad param token {token:?}"))
            })?;
            params.insert(k.to_string(), Value::parse_canonical(v)?);
        } else if let Some(rest) = token.strip_prefix("result.") {
            let (k, v) = rest.split_once('=').ok_or_else(|| {
                Error::InvalidValue(format!("line {line_no}: bad result token {token:?}"))
            })?;
            result.insert(k.to_string(), Value::parse_canonical(v)?);
        } else {
            return Err(Error::InvalidValue(format!(
                "line {line_no}: unexpected token {token:?}"
            )));
        }
    }
    let status = match status_name.as_str() {
        "created" => WorkStatus::Created,
        "dispatched" => WorkStatus::Dispatched,
        "accepted" => WorkStatus::Accepted,
        "executing" => WorkStatus::Executing,
        "completed" => WorkStatus::Completed { result },
        "failed" => WorkStatus::Failed {
            reason: reason.unwrap_or_default(),
        },
        other => {
            return Err(Error::InvalidValue(format!(
                "line {line_no}: unknown status {other:?}"
            )))
        }
    };
    Ok(RecordLine::Work {
        ts,
        revision,
        origin,
        origin_clock,
        request: WorkRequest {
            request_id: crate::ids::RequestId::from(key.as_str()),
            operation,
            params,
            requester_tier,
            target_tier,
            submitted_ts: ts,
            status,
        },
    })
}

pub fn parse(text: &str) -> Result<Snapshot> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::InvalidValue("empty snapshot".to_string()))?;
    if first != SNAPSHOT_HEADER {
        return Err(Error::InvalidValue(format!(
            "bad snapshot header {first:?}"
        )));
    }
    let mut snap = Snapshot {
        clock_ms: 0,
        cycle: 0,
        tiers: Vec::new(),
        aliases: Vec::new(),
        links: Vec::new(),
        mdbs: Vec::new(),
    };
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens = split_tokens(line)?;
        let want = |n: usize| -> Result<()> {
            if tokens.len() != n {
                Err(Error::InvalidValue(format!(
                    "line {line_no}: {} wants {n} tokens, got {}",
                    tokens[0],
                    tokens.len()
                )))
            } else {
                Ok(())
            }
        };
        match tokens[0].as_str() {
            "clock" => {
                want(2)?;
                snap.clock_ms = parse_i64(&tokens[1], "clock", line_no)?;
            }
            "cycle" => {
                want(2)?;
                snap.cycle = parse_u64(&tokens[1], "cycle", line_no)?;
            }
            "tier" => {
                want(5)?;
                snap.tiers.push(TierLine {
                    id: TierId::from(tokens[1].as_str()),
                    level: TierLevel::parse(&tokens[2])?,
                    owner: PrincipalId::from(field(&tokens[3], "owner", line_no)?),
                    version: Version::parse(field(&tokens[4], "version", line_no)?)?,
                });
            }
            "alias" => {
                want(5)?;
                snap.aliases.push(AliasLine {
                    tier: TierId::from(tokens[1].as_str()),
                    scheme: unquote(&tokens[2])?,
                    value: unquote(&tokens[3])?,
                    canonical: CanonicalId::from(tokens[4].as_str()),
                });
            }
            "link" => {
                if tokens.len() < 4 || tokens.len() > 6 {
                    return Err(Error::InvalidValue(format!(
                        "line {line_no}: link wants 4 to 6 tokens"
                    )));
                }
                let mut glob = None;
                let mut window = None;
                for token in &tokens[4..] {
                    if let Some(rest) = token.strip_prefix("glob=") {
                        glob = Some(unquote(rest)?);
                    } else if let Some(rest) = token.strip_prefix("window=") {
                        let (t0, t1) = rest.split_once("..").ok_or_else(|| {
                            Error::InvalidValue(format!("line {line_no}: bad window {rest:?}"))
                        })?;
                        window = Some((
                            parse_i64(t0, "window start", line_no)?,
                            parse_i64(t1, "window end", line_no)?,
                        ));
                    } else {
                        return Err(Error::InvalidValue(format!(
                            "line {line_no}: unexpected token {token:?}"
                        )));
                    }
                }
                snap.links.push(LinkLine {
                    id: LinkId::from(tokens[1].as_str()),
                    a: MdbId::from(tokens[2].as_str()),
                    b: MdbId::from(tokens[3].as_str()),
                    glob,
                    window,
                });
            }
            "mdb" => {
                want(5)?;
                snap.mdbs.push(MdbBlock {
                    id: MdbId::from(tokens[1].as_str()),
                    owner: PrincipalId::from(field(&tokens[2], "owner", line_no)?),
                    policy_id: unquote(field(&tokens[3], "policy", line_no)?)?,
                    policy_version: parse_u64(
                        field(&tokens[4], "policy-version", line_no)?,
                        "policy-version",
                        line_no,
                    )?,
                    stores: Vec::new(),
                });
            }
            "store" => {
                want(3)?;
                let mdb = snap.mdbs.last_mut().ok_or_else(|| {
                    Error::InvalidValue(format!("line {line_no}: store before any mdb"))
                })?;
                mdb.stores.push(StoreBlock {
                    id: StoreId::from(tokens[1].as_str()),
                    kind: parse_kind(&tokens[2], line_no)?,
                    lines: Vec::new(),
                });
            }
            "record" => {
                let store = current_store(&mut snap, line_no)?;
                store
                    .lines
                    .push(RecordLine::Plain(parse_record_tokens(&tokens, line_no)?));
            }
            "workreq" => {
                let parsed = parse_work_tokens(&tokens, line_no)?;
                let store = current_store(&mut snap, line_no)?;
                store.lines.push(parsed);
            }
            other => {
                return Err(Error::InvalidValue(format!(
                    "line {line_no}: unknown directive {other:?}"
                )));
            }
        }
    }
    Ok(snap)
}

fn current_store<'a>(snap: &'a mut Snapshot, line_no: usize) -> Result<&'a mut StoreBlock> {
    snap.mdbs
        .last_mut()
        .and_then(|m| m.stores.last_mut())
        .ok_or_else(|| Error::InvalidValue(format!("line {line_no}: record before any store")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{PrincipalId, StoreId, TierId};
    use crate::policy::PrincipalKind;
    use crate::replication::FilterCriteria;
    use crate::store::StoreKind;

    fn demo_sim() -> Simulation {
        let mut sim = Simulation::new();
        let owner = PrincipalId::from("op");
        sim.register_principal(owner.clone(), PrincipalKind::Owner, "t")
            .unwrap();
        sim.create_tier(
            TierId::from("plant-a"),
            TierLevel::Plant,
            owner.clone(),
            Version::parse("1.2.3").unwrap(),
        )
        .unwrap();
        sim.create_tier(
            TierId::from("local-1"),
            TierLevel::Local,
            owner.clone(),
            Version::parse("1.2.3").unwrap(),
        )
        .unwrap();
        sim.declare_adjacent(&TierId::from("plant-a"), &TierId::from("local-1"))
            .unwrap();
        sim.register_alias(
            &owner,
            &TierId::from("plant-a"),
            "geo",
            "47.61 N",
            CanonicalId::from("tx-17"),
        )
        .unwrap();
        let a = sim.create_mdb(&owner, &TierId::from("plant-a"), "asset").unwrap();
        let b = sim.create_mdb(&owner, &TierId::from("local-1"), "asset").unwrap();
        for m in [&a, &b] {
            sim.create_store(&owner, m, StoreId::from("readings"), StoreKind::Timeseries)
                .unwrap();
            sim.create_store(&owner, m, StoreId::from("work"), StoreKind::Work)
                .unwrap();
        }
        sim.configure_link(
            &owner,
            LinkId::from("l1"),
            &a,
            &b,
            FilterCriteria {
                key_glob: Some("temp/*".to_string()),
                window: Some((0, 86_400_000)),
            },
        )
        .unwrap();
        sim.put(
            &owner,
            &a,
            &StoreId::from("readings"),
            "temp/tx-17",
            1_000,
            Value::F64(70.5),
        )
        .unwrap();
        sim.put(
            &owner,
            &a,
            &StoreId::from("readings"),
            "note with space",
            2_000,
            Value::Str("hello \"quoted\"".to_string()),
        )
        .unwrap();
        sim.delete(&owner, &a, &StoreId::from("readings"), "temp/tx-17", 1_000)
            .unwrap();
        sim.submit_work(
            &owner,
            &a,
            &StoreId::from("work"),
            "assess-1",
            &TierId::from("local-1"),
            "assess",
            BTreeMap::from([("asset".to_string(), Value::Str("tx-17".to_string()))]),
        )
        .unwrap();
        sim.advance_clock(5_000);
        sim
    }

    #[test]
    fn render_parse_round_trip_is_identity() {
        let sim = demo_sim();
        let text = render(&sim);
        let parsed = parse(&text).unwrap();
        assert_eq!(parsed.render(), text);
        // Structured equality too: capture and parse agree.
        assert_eq!(parsed, capture(&sim));
    }

    #[test]
    fn render_is_deterministic() {
        let a = render(&demo_sim());
        let b = render(&demo_sim());
        assert_eq!(a, b);
    }

    #[test]
    fn work_records_render_decoded() {
        let text = render(&demo_sim());
        let line = text
            .lines()
            .find(|l| l.starts_with("workreq"))
            .expect("work line present");
        assert!(line.contains("op=assess"));
        assert!(line.contains("status=created"));
        assert!(line.contains("param.asset=s:tx-17"));
        // Quoted key with spaces survives.
        assert!(text.contains("record \"note with space\""));
        // Tombstone of the deleted reading renders as such.
        assert!(text.lines().any(|l| l.starts_with("record temp/tx-17") && l.ends_with("tombstone")));
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        let good = render(&demo_sim());
        assert!(parse("").is_err());
        assert!(parse("not a snapshot\n").is_err());
        let bad_directive = format!("{good}frobnicate x\n");
        assert!(parse(&bad_directive).is_err());
        // Record outside a store context.
        assert!(parse("snapshot v1\nrecord k 1 rev=1 origin=r clock=1 i:1\n").is_err());
        // Unterminated quote.
        assert!(parse("snapshot v1\nalias t geo \"oops 1 c\n").is_err());
    }

    #[test]
    fn tokenizer_keeps_quoted_spans_whole() {
        let tokens = split_tokens(r#"record "a b" 1 s:"x \" y""#).unwrap();
        assert_eq!(tokens.len(), 4);
        assert_eq!(tokens[1], r#""a b""#);
        assert_eq!(tokens[3], r#"s:"x \" y""#);
    }
}
