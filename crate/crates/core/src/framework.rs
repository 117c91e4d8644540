//! In-tier application framework.
//!
//! Services are the model-and-controller half: a `ServiceCompute` is a
//! pure function from resolved inputs and parameters to named outputs,
//! registered by name in a `ComputeRegistry` and bound at deploy time to
//! concrete stores through key patterns. Apps are the rule half: they
//! react to change events, work requests, and schedule ticks by invoking
//! services or submitting work. Related-data providers bring in context
//! the stores do not hold (weather, terrain, market data) behind the same
//! binding mechanism.
//!
//! Key patterns may reference the asset under evaluation: `{asset}`
//! substitutes its canonical id and `{alias:scheme}` substitutes its
//! identifier in another naming scheme through the tier's alias register.
//!
//! Everything a compute sees is assembled up front: store reads happen
//! under the service's own principal before the call, and outputs are
//! written after it returns, so a compute body touches no shared state.

use crate::alias::AliasRegister;
use crate::error::{Error, Result};
use crate::ids::{AppId, CanonicalId, MdbId, PrincipalId, ProviderId, ServiceId, StoreId, TierId};
use crate::mdb::Microdatabase;
use crate::value::{Value, ValueKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Slots

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotShape {
    /// Exactly one value: the latest live record for one key.
    Scalar,
    /// One key's records over a time window, in timestamp order.
    Series,
    /// The latest live record for every key matching the pattern.
    PerKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub value_kind: ValueKind,
    pub shape: SlotShape,
}

impl SlotSpec {
    pub fn scalar(name: &str, kind: ValueKind) -> SlotSpec {
        SlotSpec {
            name: name.to_string(),
            value_kind: kind,
            shape: SlotShape::Scalar,
        }
    }

    pub fn series(name: &str, kind: ValueKind) -> SlotSpec {
        SlotSpec {
            name: name.to_string(),
            value_kind: kind,
            shape: SlotShape::Series,
        }
    }

    pub fn per_key(name: &str, kind: ValueKind) -> SlotSpec {
        SlotSpec {
            name: name.to_string(),
            value_kind: kind,
            shape: SlotShape::PerKey,
        }
    }
}

// ---------------------------------------------------------------------------
// Bindings

/// Where an input slot's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SlotBinding {
    Store {
        mdb: MdbId,
        store: StoreId,
        key_pattern: String,
        /// Series slots read `[as_of - window_ms, as_of]`; `None` reads
        /// all history up to `as_of`. Ignored for other shapes.
        window_ms: Option<i64>,
    },
    Related {
        provider: ProviderId,
        /// Series reads this much history; `None` means all.
        window_ms: Option<i64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBinding {
    pub slot: String,
    pub binding: SlotBinding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBinding {
    pub slot: String,
    pub mdb: MdbId,
    pub store: StoreId,
    pub key_pattern: String,
}

/// Substitute `{asset}` and `{alias:scheme}` placeholders.
pub fn substitute_pattern(
    pattern: &str,
    asset: Option<&CanonicalId>,
    aliases: &AliasRegister,
) -> Result<String> {
    let mut out = String::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            return Err(Error::InvalidValue(format!(
                "unclosed placeholder in pattern {pattern}"
            )));
        };
        let token = &after[..close];
        let asset = asset.ok_or_else(|| Error::UnresolvedInput {
            slot: token.to_string(),
            detail: "pattern needs an asset but none is in scope".to_string(),
        })?;
        if token == "asset" {
            out.push_str(asset.as_str());
        } else if let Some(scheme) = token.strip_prefix("alias:") {
            let external = aliases.reverse(scheme, asset).ok_or_else(|| Error::UnknownAlias {
                scheme: scheme.to_string(),
                value: asset.to_string(),
            })?;
            out.push_str(external);
        } else {
            return Err(Error::InvalidValue(format!(
                "unknown placeholder {{{token}}} in pattern {pattern}"
            )));
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Compute trait and registry

/// What a compute receives: inputs resolved per slot shape, plus the
/// asset in scope and the evaluation time.
#[derive(Debug, Clone, Default)]
pub struct ResolvedInputs {
    pub scalars: BTreeMap<String, Value>,
    pub series: BTreeMap<String, Vec<(i64, Value)>>,
    pub per_key: BTreeMap<String, Vec<(String, Value)>>,
    pub asset: Option<CanonicalId>,
    pub as_of: i64,
}

impl ResolvedInputs {
    pub fn scalar(&self, slot: &str) -> Result<&Value> {
        self.scalars.get(slot).ok_or_else(|| Error::UnresolvedInput {
            slot: slot.to_string(),
            detail: "scalar slot not resolved".to_string(),
        })
    }

    pub fn scalar_f64(&self, slot: &str) -> Result<f64> {
        let v = self.scalar(slot)?;
        v.as_f64().ok_or_else(|| Error::UnresolvedInput {
            slot: slot.to_string(),
            detail: format!("expected a number, got {}", v.kind().name()),
        })
    }

    pub fn series_of(&self, slot: &str) -> Result<&[(i64, Value)]> {
        self.series
            .get(slot)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnresolvedInput {
                slot: slot.to_string(),
                detail: "series slot not resolved".to_string(),
            })
    }

    pub fn per_key_of(&self, slot: &str) -> Result<&[(String, Value)]> {
        self.per_key
            .get(slot)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnresolvedInput {
                slot: slot.to_string(),
                detail: "per-key slot not resolved".to_string(),
            })
    }
}

/// A named, pure computation. Implementations read nothing but their
/// arguments; the runtime does all store and provider access.
pub trait ServiceCompute: Send + Sync {
    fn name(&self) -> &'static str;
    fn input_slots(&self) -> Vec<SlotSpec>;
    fn output_slots(&self) -> Vec<SlotSpec>;
    fn default_params(&self) -> BTreeMap<String, Value> {
        BTreeMap::new()
    }
    fn compute(
        &self,
        inputs: &ResolvedInputs,
        params: &BTreeMap<String, Value>,
    ) -> Result<BTreeMap<String, Value>>;
}

#[derive(Default, Clone)]
pub struct ComputeRegistry {
    by_name: BTreeMap<String, Arc<dyn ServiceCompute>>,
}

impl ComputeRegistry {
    pub fn register(&mut self, compute: Arc<dyn ServiceCompute>) -> Result<()> {
        let name = compute.name().to_string();
        if self.by_name.contains_key(&name) {
            return Err(Error::ConflictingRedefinition(name));
        }
        self.by_name.insert(name, compute);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn ServiceCompute>> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::UnknownService(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.by_name.keys().map(|s| s.as_str()).collect()
    }
}

// ---------------------------------------------------------------------------
// Related-data providers

#[derive(Debug, Clone, PartialEq)]
pub struct RelatedQuery {
    pub provider: ProviderId,
    pub asset: Option<CanonicalId>,
    /// Inclusive window; scalar resolution uses `[i64::MIN, as_of]`.
    pub window: (i64, i64),
    /// Asset context: canonical id, tags split at the first `:`, and
    /// reverse aliases under `alias.<scheme>`.
    pub context: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatedPoint {
    pub ts: i64,
    pub value: Value,
}

/// An external data source adapter. Instances are built by a factory and
/// owned by a tier.
pub trait RelatedDataSource: Send + Sync {
    fn name(&self) -> &str;
    fn fetch(&self, query: &RelatedQuery) -> Result<Vec<RelatedPoint>>;
}

/// Builds provider instances from configuration, registered by kind.
pub trait ProviderFactory: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, config: &BTreeMap<String, Value>) -> Result<Box<dyn RelatedDataSource>>;
}

#[derive(Default, Clone)]
pub struct ProviderFactoryRegistry {
    by_name: BTreeMap<String, Arc<dyn ProviderFactory>>,
}

impl ProviderFactoryRegistry {
    pub fn register(&mut self, factory: Arc<dyn ProviderFactory>) -> Result<()> {
        let name = factory.name().to_string();
        if self.by_name.contains_key(&name) {
            return Err(Error::ConflictingRedefinition(name));
        }
        self.by_name.insert(name, factory);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn ProviderFactory>> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::UnknownProvider(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.by_name.keys().map(|s| s.as_str()).collect()
    }
}

// ---------------------------------------------------------------------------
// Deployed instances

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceInstance {
    pub service_id: ServiceId,
    pub compute_name: String,
    pub tier: TierId,
    /// Acts under this pre-declared principal for every read and write.
    pub principal: PrincipalId,
    pub params: BTreeMap<String, Value>,
    pub inputs: Vec<InputBinding>,
    pub outputs: Vec<OutputBinding>,
    /// Microdatabase whose information model describes the assets this
    /// service evaluates; provider queries draw context from it.
    pub model_mdb: Option<MdbId>,
    pub declared_connections: BTreeSet<ProviderId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AppAction {
    /// Run the tier's instance of this compute against the asset in
    /// scope.
    Invoke { service: String },
    SubmitWork {
        mdb: MdbId,
        store: StoreId,
        target_tier: TierId,
        operation: String,
        params: BTreeMap<String, Value>,
    },
    /// React by doing nothing observable except the audit trail.
    Observe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AppRule {
    OnEvent {
        mdb: MdbId,
        store: StoreId,
        key_glob: String,
        /// When set, the key prefix before `/` is an external identifier
        /// in this scheme; otherwise it is the canonical asset id.
        scheme: Option<String>,
        action: AppAction,
    },
    OnWork {
        operation: String,
        action: AppAction,
    },
    OnSchedule {
        tag: String,
        action: AppAction,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppInstance {
    pub app_id: AppId,
    pub name: String,
    pub tier: TierId,
    pub principal: PrincipalId,
    pub rules: Vec<AppRule>,
}

// ---------------------------------------------------------------------------
// Input resolution against a store

/// Resolve one store-bound slot from a microdatabase, under the given
/// principal's grants. Scalar slots demand exactly one matching key.
pub fn resolve_store_slot(
    mdb: &Microdatabase,
    principal: &PrincipalId,
    spec: &SlotSpec,
    store: &StoreId,
    key: &str,
    window_ms: Option<i64>,
    as_of: i64,
    out: &mut ResolvedInputs,
) -> Result<()> {
    match spec.shape {
        SlotShape::Scalar => {
            let matches = mdb.latest_per_key(principal, store, key, as_of)?;
            match matches.len() {
                0 => Err(Error::UnresolvedInput {
                    slot: spec.name.clone(),
                    detail: format!("no live record for {key} at or before {as_of}"),
                }),
                1 => {
                    let rec = matches[0];
                    let value = rec.value.clone().expect("live record has a value");
                    check_kind(&spec.name, spec.value_kind, &value)?;
                    out.scalars.insert(spec.name.clone(), value);
                    Ok(())
                }
                n => Err(Error::UnresolvedInput {
                    slot: spec.name.clone(),
                    detail: format!("{n} keys match {key}; a scalar slot needs exactly one"),
                }),
            }
        }
        SlotShape::Series => {
            let t0 = window_ms.map(|w| as_of.saturating_sub(w)).unwrap_or(i64::MIN);
            let recs = mdb.range(principal, store, key, t0, as_of)?;
            let mut points = Vec::with_capacity(recs.len());
            for rec in recs {
                let value = rec.value.clone().expect("range returns live records");
                check_kind(&spec.name, spec.value_kind, &value)?;
                points.push((rec.ts, value));
            }
            points.sort_by_key(|(ts, _)| *ts);
            out.series.insert(spec.name.clone(), points);
            Ok(())
        }
        SlotShape::PerKey => {
            let recs = mdb.latest_per_key(principal, store, key, as_of)?;
            let mut entries = Vec::with_capacity(recs.len());
            for rec in recs {
                let value = rec.value.clone().expect("live record has a value");
                check_kind(&spec.name, spec.value_kind, &value)?;
                entries.push((rec.key.clone(), value));
            }
            out.per_key.insert(spec.name.clone(), entries);
            Ok(())
        }
    }
}

/// Fold provider points into the resolved inputs per the slot shape.
pub fn resolve_related_slot(
    spec: &SlotSpec,
    points: Vec<RelatedPoint>,
    as_of: i64,
    out: &mut ResolvedInputs,
) -> Result<()> {
    match spec.shape {
        SlotShape::Scalar => {
            let latest = points
                .into_iter()
                .filter(|p| p.ts <= as_of)
                .max_by_key(|p| p.ts)
                .ok_or_else(|| Error::UnresolvedInput {
                    slot: spec.name.clone(),
                    detail: format!("provider returned no point at or before {as_of}"),
                })?;
            check_kind(&spec.name, spec.value_kind, &latest.value)?;
            out.scalars.insert(spec.name.clone(), latest.value);
            Ok(())
        }
        SlotShape::Series => {
            let mut series: Vec<(i64, Value)> = Vec::with_capacity(points.len());
            for p in points {
                check_kind(&spec.name, spec.value_kind, &p.value)?;
                series.push((p.ts, p.value));
            }
            series.sort_by_key(|(ts, _)| *ts);
            out.series.insert(spec.name.clone(), series);
            Ok(())
        }
        SlotShape::PerKey => Err(Error::UnresolvedInput {
            slot: spec.name.clone(),
            detail: "a per-key slot cannot bind to a provider".to_string(),
        }),
    }
}

/// Ints widen into float slots; everything else must match exactly.
fn check_kind(slot: &str, expected: ValueKind, value: &Value) -> Result<()> {
    let actual = value.kind();
    let ok = actual == expected || (expected == ValueKind::Float && actual == ValueKind::Int);
    if ok {
        Ok(())
    } else {
        Err(Error::KindMismatch(format!(
            "slot {slot} expects {}, got {}",
            expected.name(),
            actual.name()
        )))
    }
}
