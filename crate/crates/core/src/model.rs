//! Information model: asset types, asset instances, and discovery.
//!
//! Types are property schemas (name, unit, value kind); instances bind a
//! canonical asset id to concrete store keys, property by property. Model
//! changes never publish events: discovery is a pull-time concern and
//! configuration churn must not wake data subscribers.

use crate::error::{Error, Result};
use crate::ids::{CanonicalId, StoreId};
use crate::value::ValueKind;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub name: String,
    pub unit: String,
    pub kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetType {
    pub name: String,
    /// Sorted by property name; construction normalizes, so equality is
    /// set equality and redefinition checks are order-insensitive.
    pub properties: Vec<PropertySpec>,
}

impl AssetType {
    pub fn new(name: impl Into<String>, mut properties: Vec<PropertySpec>) -> Self {
        properties.sort_by(|a, b| a.name.cmp(&b.name));
        AssetType {
            name: name.into(),
            properties,
        }
    }

    pub fn property(&self, name: &str) -> Option<&PropertySpec> {
        self.properties.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyBinding {
    pub prop_name: String,
    pub store_id: StoreId,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetInstance {
    pub canonical_id: CanonicalId,
    pub type_name: String,
    pub tags: BTreeSet<String>,
    /// Sorted by property name at registration.
    pub bindings: Vec<PropertyBinding>,
}

/// A discovery query; empty fields match everything, listed tags must all
/// be present (conjunctive).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiscoverQuery {
    pub type_name: Option<String>,
    pub tags: Vec<String>,
}

/// One row of a discovery result: where to find one property of one asset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveredBinding {
    pub canonical_id: CanonicalId,
    pub prop_name: String,
    pub store_id: StoreId,
    pub key: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InfoModel {
    types: BTreeMap<String, AssetType>,
    instances: BTreeMap<CanonicalId, AssetInstance>,
}

impl InfoModel {
    /// Define a type. Redefining with identical content is idempotent;
    /// differing content is rejected.
    pub fn define_type(&mut self, ty: AssetType) -> Result<()> {
        if let Some(existing) = self.types.get(&ty.name) {
            if *existing == ty {
                return Ok(());
            }
            return Err(Error::ConflictingRedefinition(ty.name));
        }
        self.types.insert(ty.name.clone(), ty);
        Ok(())
    }

    pub fn get_type(&self, name: &str) -> Option<&AssetType> {
        self.types.get(name)
    }

    pub fn types(&self) -> impl Iterator<Item = &AssetType> {
        self.types.values()
    }

    /// Register (or replace) an instance. Bindings must reference an
    /// existing store (checked by the caller via `store_exists`) and a
    /// property of the instance's type.
    pub fn register_instance(
        &mut self,
        mut instance: AssetInstance,
        store_exists: impl Fn(&StoreId) -> bool,
    ) -> Result<()> {
        let ty = self
            .types
            .get(&instance.type_name)
            .ok_or_else(|| Error::UnknownType(instance.type_name.clone()))?;
        for b in &instance.bindings {
            if ty.property(&b.prop_name).is_none() {
                return Err(Error::DanglingBinding(format!(
                    "property {} not in type {}",
                    b.prop_name, ty.name
                )));
            }
            if !store_exists(&b.store_id) {
                return Err(Error::DanglingBinding(format!(
                    "store {} does not exist",
                    b.store_id
                )));
            }
        }
        instance.bindings.sort_by(|a, b| a.prop_name.cmp(&b.prop_name));
        self.instances
            .insert(instance.canonical_id.clone(), instance);
        Ok(())
    }

    pub fn instance(&self, id: &CanonicalId) -> Option<&AssetInstance> {
        self.instances.get(id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &AssetInstance> {
        self.instances.values()
    }

    /// All bindings of instances matching the query, ordered by
    /// (canonical_id, prop_name).
    pub fn discover(&self, query: &DiscoverQuery) -> Vec<DiscoveredBinding> {
        let mut out = Vec::new();
        for inst in self.instances.values() {
            if let Some(t) = &query.type_name {
                if &inst.type_name != t {
                    continue;
                }
            }
            if !query.tags.iter().all(|t| inst.tags.contains(t)) {
                continue;
            }
            for b in &inst.bindings {
                out.push(DiscoveredBinding {
                    canonical_id: inst.canonical_id.clone(),
                    prop_name: b.prop_name.clone(),
                    store_id: b.store_id.clone(),
                    key: b.key.clone(),
                });
            }
        }
        // instances and bindings are already sorted; keep the invariant
        // explicit regardless.
        out.sort_by(|a, b| {
            (&a.canonical_id, &a.prop_name).cmp(&(&b.canonical_id, &b.prop_name))
        });
        out
    }

    /// Free-text search over canonical ids, type names, and tags
    /// (case-sensitive substring). Returns matching instances by id order.
    pub fn search(&self, text: &str) -> Vec<&AssetInstance> {
        self.instances
            .values()
            .filter(|i| {
                i.canonical_id.as_str().contains(text)
                    || i.type_name.contains(text)
                    || i.tags.iter().any(|t| t.contains(text))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transformer_type() -> AssetType {
        AssetType::new(
            "PowerTransformer",
            vec![
                PropertySpec {
                    name: "top_oil_temp".into(),
                    unit: "C".into(),
                    kind: ValueKind::Float,
                },
                PropertySpec {
                    name: "load_pct".into(),
                    unit: "pct".into(),
                    kind: ValueKind::Float,
                },
            ],
        )
    }

    fn inst(id: &str, tags: &[&str], bindings: &[(&str, &str, &str)]) -> AssetInstance {
        AssetInstance {
            canonical_id: CanonicalId::from(id),
            type_name: "PowerTransformer".into(),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            bindings: bindings
                .iter()
                .map(|(p, s, k)| PropertyBinding {
                    prop_name: p.to_string(),
                    store_id: StoreId::from(*s),
                    key: k.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn identical_redefinition_is_idempotent() {
        let mut m = InfoModel::default();
        m.define_type(transformer_type()).unwrap();
        m.define_type(transformer_type()).unwrap();
        // Order-insensitive: reversed property list is the same type.
        let mut reversed = transformer_type();
        reversed.properties.reverse();
        let reversed = AssetType::new("PowerTransformer", reversed.properties);
        m.define_type(reversed).unwrap();
        assert_eq!(m.types().count(), 1);
    }

    #[test]
    fn conflicting_redefinition_rejected() {
        let mut m = InfoModel::default();
        m.define_type(transformer_type()).unwrap();
        let other = AssetType::new(
            "PowerTransformer",
            vec![PropertySpec {
                name: "top_oil_temp".into(),
                unit: "K".into(), // unit differs
                kind: ValueKind::Float,
            }],
        );
        assert_eq!(
            m.define_type(other).unwrap_err(),
            Error::ConflictingRedefinition("PowerTransformer".into())
        );
    }

    #[test]
    fn register_checks_type_property_and_store() {
        let mut m = InfoModel::default();
        m.define_type(transformer_type()).unwrap();
        let ok = |s: &StoreId| s.as_str() == "readings";

        assert_eq!(
            m.register_instance(inst("C1", &[], &[]), ok).err(),
            None
        );
        let bad_type = AssetInstance {
            type_name: "Pump".into(),
            ..inst("C2", &[], &[])
        };
        assert_eq!(
            m.register_instance(bad_type, ok).unwrap_err(),
            Error::UnknownType("Pump".into())
        );
        let bad_prop = inst("C3", &[], &[("vibration", "readings", "k")]);
        assert!(matches!(
            m.register_instance(bad_prop, ok).unwrap_err(),
            Error::DanglingBinding(_)
        ));
        let bad_store = inst("C4", &[], &[("load_pct", "gone", "k")]);
        assert!(matches!(
            m.register_instance(bad_store, ok).unwrap_err(),
            Error::DanglingBinding(_)
        ));
    }

    #[test]
    fn discover_filters_conjunctively_and_orders() {
        let mut m = InfoModel::default();
        m.define_type(transformer_type()).unwrap();
        let ok = |_: &StoreId| true;
        m.register_instance(
            inst(
                "C2",
                &["hv", "north"],
                &[("top_oil_temp", "readings", "TX-2/t"), ("load_pct", "readings", "TX-2/l")],
            ),
            ok,
        )
        .unwrap();
        m.register_instance(
            inst("C1", &["hv"], &[("top_oil_temp", "readings", "TX-1/t")]),
            ok,
        )
        .unwrap();

        let all = m.discover(&DiscoverQuery::default());
        let rows: Vec<(&str, &str)> = all
            .iter()
            .map(|d| (d.canonical_id.as_str(), d.prop_name.as_str()))
            .collect();
        assert_eq!(
            rows,
            vec![
                ("C1", "top_oil_temp"),
                ("C2", "load_pct"),
                ("C2", "top_oil_temp"),
            ]
        );

        let north = m.discover(&DiscoverQuery {
            type_name: Some("PowerTransformer".into()),
            tags: vec!["hv".into(), "north".into()],
        });
        assert!(north.iter().all(|d| d.canonical_id.as_str() == "C2"));
        assert_eq!(north.len(), 2);

        let none = m.discover(&DiscoverQuery {
            type_name: Some("Pump".into()),
            tags: vec![],
        });
        assert!(none.is_empty());
    }

    /// Oracle check: discover against an independently coded filter over
    /// the raw instance list, across randomized queries.
    #[test]
    fn discover_matches_linear_scan_oracle() {
        let mut m = InfoModel::default();
        m.define_type(transformer_type()).unwrap();
        let ok = |_: &StoreId| true;
        let tag_pool = ["hv", "lv", "north", "south", "critical"];
        let mut state = 99u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for i in 0..12 {
            let mut tags = vec![];
            for t in tag_pool {
                if next() % 2 == 0 {
                    tags.push(t);
                }
            }
            m.register_instance(
                inst(&format!("C{i:02}"), &tags, &[("load_pct", "readings", "k")]),
                ok,
            )
            .unwrap();
        }
        for _ in 0..50 {
            let mut qtags = vec![];
            for t in tag_pool {
                if next() % 4 == 0 {
                    qtags.push(t.to_string());
                }
            }
            let q = DiscoverQuery {
                type_name: if next() % 3 == 0 {
                    Some("PowerTransformer".into())
                } else {
                    None
                },
                tags: qtags.clone(),
            };
            let got: Vec<String> = m
                .discover(&q)
                .iter()
                .map(|d| d.canonical_id.to_string())
                .collect();
            // Oracle: scan the instance list directly.
            let mut want: Vec<String> = m
                .instances()
                .filter(|inst| qtags.iter().all(|t| inst.tags.contains(t)))
                .map(|inst| inst.canonical_id.to_string())
                .collect();
            want.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn search_is_substring_over_identity() {
        let mut m = InfoModel::default();
        m.define_type(transformer_type()).unwrap();
        let ok = |_: &StoreId| true;
        m.register_instance(inst("C-TX17", &["substation:north"], &[]), ok)
            .unwrap();
        m.register_instance(inst("C-TX21", &["substation:south"], &[]), ok)
            .unwrap();
        assert_eq!(m.search("TX17").len(), 1);
        assert_eq!(m.search("substation").len(), 2);
        assert_eq!(m.search("PowerTransformer").len(), 2);
        assert_eq!(m.search("pump").len(), 0);
    }
}
