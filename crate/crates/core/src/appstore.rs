//! Catalog of deployable content.
//!
//! A catalog entry is a manifest plus a sealed payload: the manifest
//! carries identity, version, the platform version it needs, the
//! connections it expects at deploy time, and a hash over the payload
//! text. Published (name, version) pairs are immutable; changing content
//! means publishing a new version. Only trusted publishers may publish,
//! and every publish or deploy appends a provenance record.
//!
//! Payloads are line-oriented text, by kind:
//!
//! * microdatabase template: `store <id> <kind>` and
//!   `type <name> <prop>:<unit>:<kind> ...`
//! * app service: `compute <name>`, `model <mdb-name>`,
//!   `connect <provider>`, `param <key> <value>`,
//!   `input <slot> store <mdb-name> <store> <pattern> [window=<ms>]`,
//!   `input <slot> related <provider> [window=<ms>]`,
//!   `output <slot> <mdb-name> <store> <pattern>`
//! * app: `on-event <mdb-name> <store> <glob> [scheme=<s>] <action>`,
//!   `on-work <operation> <action>`, `on-schedule <tag> <action>` where
//!   an action is `invoke <service>`, `observe`, or
//!   `submit-work <mdb-name> <store> <target-tier> <operation> [k=v ...]`
//!
//! Microdatabase references inside payloads are bare names; deployment
//! resolves them against the target tier, which keeps one payload
//! portable across tiers.

use crate::error::{Error, Result};
use crate::ids::{PrincipalId, ProviderId, StoreId, TierId};
use crate::model::{AssetType, PropertySpec};
use crate::store::StoreKind;
use crate::value::{Value, ValueKind};
use crate::version::Version;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManifestKind {
    App,
    AppService,
    MdbTemplate,
}

impl ManifestKind {
    pub fn name(&self) -> &'static str {
        match self {
            ManifestKind::App => "app",
            ManifestKind::AppService => "app_service",
            ManifestKind::MdbTemplate => "mdb_template",
        }
    }
}

/// A dependency the content expects in the tier it lands in. The deployer
/// can acknowledge a connection that cannot be checked locally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connection {
    /// A microdatabase with this name must exist in the tier.
    Mdb(String),
    /// A provider instance with this id must exist in the tier.
    Provider(ProviderId),
    /// The tier must be linked toward this tier.
    Link(TierId),
}

impl Connection {
    pub fn describe(&self) -> String {
        match self {
            Connection::Mdb(n) => format!("mdb {n}"),
            Connection::Provider(p) => format!("provider {p}"),
            Connection::Link(t) => format!("link {t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionDecl {
    pub connection: Connection,
    pub acknowledged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ManifestKind,
    pub name: String,
    pub version: Version,
    pub required_platform_version: Version,
    pub connections: Vec<ConnectionDecl>,
    /// Hex sha-256 over the payload text.
    pub content_hash: String,
    pub publisher: PrincipalId,
}

pub fn content_hash(payload: &str) -> String {
    let digest = Sha256::digest(payload.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub action: String,
    pub principal: PrincipalId,
    pub tier: Option<TierId>,
    pub at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub manifest: Manifest,
    pub payload: String,
    pub provenance: Vec<ProvenanceRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Catalog {
    trusted_publishers: BTreeSet<PrincipalId>,
    entries: BTreeMap<(String, String), CatalogEntry>,
}

impl Catalog {
    pub fn trust_publisher(&mut self, p: PrincipalId) {
        self.trusted_publishers.insert(p);
    }

    pub fn is_trusted(&self, p: &PrincipalId) -> bool {
        self.trusted_publishers.contains(p)
    }

    pub fn publish(&mut self, manifest: Manifest, payload: String, at_ms: i64) -> Result<()> {
        if !self.trusted_publishers.contains(&manifest.publisher) {
            return Err(Error::Unauthorized {
                principal: manifest.publisher.to_string(),
                action: "publish".to_string(),
                scope: "catalog".to_string(),
            });
        }
        let actual = content_hash(&payload);
        if actual != manifest.content_hash {
            return Err(Error::HashMismatch {
                expected: manifest.content_hash.clone(),
                actual,
            });
        }
        let key = (manifest.name.clone(), manifest.version.to_string());
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateVersion {
                name: key.0,
                version: key.1,
            });
        }
        let publisher = manifest.publisher.clone();
        self.entries.insert(
            key,
            CatalogEntry {
                manifest,
                payload,
                provenance: vec![ProvenanceRecord {
                    action: "published".to_string(),
                    principal: publisher,
                    tier: None,
                    at_ms,
                }],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str, version: &Version) -> Result<&CatalogEntry> {
        self.entries
            .get(&(name.to_string(), version.to_string()))
            .ok_or_else(|| Error::UnknownEntry {
                name: name.to_string(),
                version: version.to_string(),
            })
    }

    pub fn record_provenance(
        &mut self,
        name: &str,
        version: &Version,
        record: ProvenanceRecord,
    ) -> Result<()> {
        let entry = self
            .entries
            .get_mut(&(name.to_string(), version.to_string()))
            .ok_or_else(|| Error::UnknownEntry {
                name: name.to_string(),
                version: version.to_string(),
            })?;
        entry.provenance.push(record);
        Ok(())
    }

    /// Substring search over entry names.
    pub fn search(&self, text: &str) -> Vec<&CatalogEntry> {
        self.entries
            .values()
            .filter(|e| e.manifest.name.contains(text))
            .collect()
    }

    pub fn list(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }
}

// ---------------------------------------------------------------------------
// Payload grammars

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSpec {
    pub stores: Vec<(StoreId, StoreKind)>,
    pub types: Vec<AssetType>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServiceSpecInput {
    Store {
        slot: String,
        mdb_name: String,
        store: StoreId,
        pattern: String,
        window_ms: Option<i64>,
    },
    Related {
        slot: String,
        provider: ProviderId,
        window_ms: Option<i64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSpecOutput {
    pub slot: String,
    pub mdb_name: String,
    pub store: StoreId,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSpec {
    pub compute: String,
    pub inputs: Vec<ServiceSpecInput>,
    pub outputs: Vec<ServiceSpecOutput>,
    pub model_mdb_name: Option<String>,
    pub connections: BTreeSet<ProviderId>,
    pub params: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AppSpecAction {
    Invoke { service: String },
    SubmitWork {
        mdb_name: String,
        store: StoreId,
        target_tier: TierId,
        operation: String,
        params: BTreeMap<String, Value>,
    },
    Observe,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AppSpecRule {
    OnEvent {
        mdb_name: String,
        store: StoreId,
        key_glob: String,
        scheme: Option<String>,
        action: AppSpecAction,
    },
    OnWork {
        operation: String,
        action: AppSpecAction,
    },
    OnSchedule {
        tag: String,
        action: AppSpecAction,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppSpec {
    pub rules: Vec<AppSpecRule>,
}

fn mal(line: usize, reason: impl std::fmt::Display) -> Error {
    Error::MalformedManifest(format!("line {line}: {reason}"))
}

fn content_lines(payload: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    payload.lines().enumerate().filter_map(|(ix, raw)| {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            None
        } else {
            Some((ix + 1, content.split_whitespace().collect()))
        }
    })
}

pub fn parse_template_payload(payload: &str) -> Result<TemplateSpec> {
    let mut spec = TemplateSpec {
        stores: Vec::new(),
        types: Vec::new(),
    };
    for (line, tokens) in content_lines(payload) {
        match tokens[0] {
            "store" => {
                if tokens.len() != 3 {
                    return Err(mal(line, "expected: store <id> <kind>"));
                }
                let kind = StoreKind::parse(tokens[2]).map_err(|e| mal(line, e))?;
                spec.stores.push((StoreId::from(tokens[1]), kind));
            }
            "type" => {
                if tokens.len() < 3 {
                    return Err(mal(line, "expected: type <name> <prop>:<unit>:<kind> ..."));
                }
                let mut props = Vec::new();
                for p in &tokens[2..] {
                    let parts: Vec<&str> = p.split(':').collect();
                    if parts.len() != 3 {
                        return Err(mal(line, format!("property {p} is not <name>:<unit>:<kind>")));
                    }
                    let kind = ValueKind::parse(parts[2]).map_err(|e| mal(line, e))?;
                    props.push(PropertySpec {
                        name: parts[0].to_string(),
                        unit: parts[1].to_string(),
                        kind,
                    });
                }
                spec.types.push(AssetType::new(tokens[1], props));
            }
            other => return Err(mal(line, format!("unknown directive {other}"))),
        }
    }
    Ok(spec)
}

fn parse_window_opt(token: Option<&&str>, line: usize) -> Result<Option<i64>> {
    match token {
        None => Ok(None),
        Some(t) => {
            let v = t
                .strip_prefix("window=")
                .ok_or_else(|| mal(line, format!("unknown option {t}")))?;
            let ms: i64 = v.parse().map_err(|_| mal(line, "window must be an integer"))?;
            if ms <= 0 {
                return Err(mal(line, "window must be positive"));
            }
            Ok(Some(ms))
        }
    }
}

pub fn parse_service_payload(payload: &str) -> Result<ServiceSpec> {
    let mut compute: Option<String> = None;
    let mut spec = ServiceSpec {
        compute: String::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        model_mdb_name: None,
        connections: BTreeSet::new(),
        params: BTreeMap::new(),
    };
    for (line, tokens) in content_lines(payload) {
        match tokens[0] {
            "compute" => {
                if tokens.len() != 2 {
                    return Err(mal(line, "expected: compute <name>"));
                }
                if compute.is_some() {
                    return Err(mal(line, "duplicate compute line"));
                }
                compute = Some(tokens[1].to_string());
            }
            "model" => {
                if tokens.len() != 2 {
                    return Err(mal(line, "expected: model <mdb-name>"));
                }
                spec.model_mdb_name = Some(tokens[1].to_string());
            }
            "connect" => {
                if tokens.len() != 2 {
                    return Err(mal(line, "expected: connect <provider>"));
                }
                spec.connections.insert(ProviderId::from(tokens[1]));
            }
            "param" => {
                if tokens.len() != 3 {
                    return Err(mal(line, "expected: param <key> <value>"));
                }
                let value = Value::parse_canonical(tokens[2]).map_err(|e| mal(line, e))?;
                spec.params.insert(tokens[1].to_string(), value);
            }
            "input" => match tokens.get(2) {
                Some(&"store") => {
                    if tokens.len() < 6 || tokens.len() > 7 {
                        return Err(mal(
                            line,
                            "expected: input <slot> store <mdb-name> <store> <pattern> [window=<ms>]",
                        ));
                    }
                    let window_ms = parse_window_opt(tokens.get(6), line)?;
                    spec.inputs.push(ServiceSpecInput::Store {
                        slot: tokens[1].to_string(),
                        mdb_name: tokens[3].to_string(),
                        store: StoreId::from(tokens[4]),
                        pattern: tokens[5].to_string(),
                        window_ms,
                    });
                }
                Some(&"related") => {
                    if tokens.len() < 4 || tokens.len() > 5 {
                        return Err(mal(
                            line,
                            "expected: input <slot> related <provider> [window=<ms>]",
                        ));
                    }
                    let window_ms = parse_window_opt(tokens.get(4), line)?;
                    spec.inputs.push(ServiceSpecInput::Related {
                        slot: tokens[1].to_string(),
                        provider: ProviderId::from(tokens[3]),
                        window_ms,
                    });
                }
                _ => return Err(mal(line, "input source must be 'store' or 'related'")),
            },
            "output" => {
                if tokens.len() != 5 {
                    return Err(mal(line, "expected: output <slot> <mdb-name> <store> <pattern>"));
                }
                spec.outputs.push(ServiceSpecOutput {
                    slot: tokens[1].to_string(),
                    mdb_name: tokens[2].to_string(),
                    store: StoreId::from(tokens[3]),
                    pattern: tokens[4].to_string(),
                });
            }
            other => return Err(mal(line, format!("unknown directive {other}"))),
        }
    }
    spec.compute = compute.ok_or_else(|| mal(0, "missing compute line"))?;
    Ok(spec)
}

fn parse_action(tokens: &[&str], line: usize) -> Result<AppSpecAction> {
    match tokens.first() {
        Some(&"invoke") => {
            if tokens.len() != 2 {
                return Err(mal(line, "expected: invoke <service>"));
            }
            Ok(AppSpecAction::Invoke {
                service: tokens[1].to_string(),
            })
        }
        Some(&"observe") => {
            if tokens.len() != 1 {
                return Err(mal(line, "observe takes no arguments"));
            }
            Ok(AppSpecAction::Observe)
        }
        Some(&"submit-work") => {
            if tokens.len() < 5 {
                return Err(mal(
                    line,
                    "expected: submit-work <mdb-name> <store> <target-tier> <operation> [k=v ...]",
                ));
            }
            let mut params = BTreeMap::new();
            for kv in &tokens[5..] {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| mal(line, format!("parameter {kv} is not k=v")))?;
                params.insert(
                    k.to_string(),
                    Value::parse_canonical(v).map_err(|e| mal(line, e))?,
                );
            }
            Ok(AppSpecAction::SubmitWork {
                mdb_name: tokens[1].to_string(),
                store: StoreId::from(tokens[2]),
                target_tier: TierId::from(tokens[3]),
                operation: tokens[4].to_string(),
                params,
            })
        }
        _ => Err(mal(line, "expected an action: invoke, observe, or submit-work")),
    }
}

pub fn parse_app_payload(payload: &str) -> Result<AppSpec> {
    let mut rules = Vec::new();
    for (line, tokens) in content_lines(payload) {
        match tokens[0] {
            "on-event" => {
                if tokens.len() < 5 {
                    return Err(mal(
                        line,
                        "expected: on-event <mdb-name> <store> <glob> [scheme=<s>] <action>",
                    ));
                }
                let mut rest = 4;
                let mut scheme = None;
                if let Some(s) = tokens[4].strip_prefix("scheme=") {
                    scheme = Some(s.to_string());
                    rest = 5;
                }
                let action = parse_action(&tokens[rest..], line)?;
                rules.push(AppSpecRule::OnEvent {
                    mdb_name: tokens[1].to_string(),
                    store: StoreId::from(tokens[2]),
                    key_glob: tokens[3].to_string(),
                    scheme,
                    action,
                });
            }
            "on-work" => {
                if tokens.len() < 3 {
                    return Err(mal(line, "expected: on-work <operation> <action>"));
                }
                rules.push(AppSpecRule::OnWork {
                    operation: tokens[1].to_string(),
                    action: parse_action(&tokens[2..], line)?,
                });
            }
            "on-schedule" => {
                if tokens.len() < 3 {
                    return Err(mal(line, "expected: on-schedule <tag> <action>"));
                }
                rules.push(AppSpecRule::OnSchedule {
                    tag: tokens[1].to_string(),
                    action: parse_action(&tokens[2..], line)?,
                });
            }
            other => return Err(mal(line, format!("unknown directive {other}"))),
        }
    }
    Ok(AppSpec { rules })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(name: &str, version: &str, payload: &str, publisher: &str) -> Manifest {
        Manifest {
            kind: ManifestKind::App,
            name: name.to_string(),
            version: Version::parse(version).unwrap(),
            required_platform_version: Version::parse("1.0.0").unwrap(),
            connections: vec![],
            content_hash: content_hash(payload),
            publisher: PrincipalId::from(publisher),
        }
    }

    #[test]
    fn publish_gates_on_trust_hash_and_uniqueness() {
        let mut cat = Catalog::default();
        let payload = "on-schedule daily observe\n";

        let m = manifest("app-x", "1.0.0", payload, "vendor");
        let err = cat.publish(m.clone(), payload.to_string(), 0).unwrap_err();
        assert_eq!(err.variant_name(), "Unauthorized");

        cat.trust_publisher(PrincipalId::from("vendor"));
        cat.publish(m.clone(), payload.to_string(), 0).unwrap();

        // Tampered payload fails the hash check.
        let mut m2 = manifest("app-y", "1.0.0", payload, "vendor");
        m2.content_hash = content_hash("something else");
        assert_eq!(
            cat.publish(m2, payload.to_string(), 0).unwrap_err().variant_name(),
            "HashMismatch"
        );

        // Same name and version cannot be replaced, even by the
        // original publisher with identical content.
        assert_eq!(
            cat.publish(m, payload.to_string(), 1).unwrap_err().variant_name(),
            "DuplicateVersion"
        );

        // A new version of the same name is fine.
        let m3 = manifest("app-x", "1.1.0", payload, "vendor");
        cat.publish(m3, payload.to_string(), 2).unwrap();
        assert_eq!(cat.search("app-x").len(), 2);
        assert!(cat.get("app-x", &Version::parse("1.0.0").unwrap()).is_ok());
        assert_eq!(
            cat.get("app-x", &Version::parse("9.0.0").unwrap()).err().unwrap().variant_name(),
            "UnknownEntry"
        );
    }

    #[test]
    fn provenance_accumulates() {
        let mut cat = Catalog::default();
        cat.trust_publisher(PrincipalId::from("vendor"));
        let payload = "on-schedule t observe\n";
        cat.publish(manifest("a", "1.0.0", payload, "vendor"), payload.to_string(), 5)
            .unwrap();
        cat.record_provenance(
            "a",
            &Version::parse("1.0.0").unwrap(),
            ProvenanceRecord {
                action: "deployed".to_string(),
                principal: PrincipalId::from("utilA"),
                tier: Some(TierId::from("plant-a")),
                at_ms: 9,
            },
        )
        .unwrap();
        let entry = cat.get("a", &Version::parse("1.0.0").unwrap()).unwrap();
        let actions: Vec<&str> = entry.provenance.iter().map(|p| p.action.as_str()).collect();
        assert_eq!(actions, vec!["published", "deployed"]);
    }

    #[test]
    fn template_payload_parses() {
        let spec = parse_template_payload(
            "# transformer asset bundle\nstore readings timeseries\nstore health timeseries\ntype transformer load:kW:float top_oil_temp:C:float gas_ppm:ppm:float\n",
        )
        .unwrap();
        assert_eq!(spec.stores.len(), 2);
        assert_eq!(spec.stores[0], (StoreId::from("readings"), StoreKind::Timeseries));
        assert_eq!(spec.types.len(), 1);
        assert_eq!(spec.types[0].name, "transformer");
        assert_eq!(spec.types[0].properties.len(), 3);

        assert!(parse_template_payload("store x\n").is_err());
        assert!(parse_template_payload("type t badprop\n").is_err());
        assert!(parse_template_payload("shop x y\n").is_err());
    }

    #[test]
    fn service_payload_parses() {
        let text = "compute transformer-health\nmodel asset\nconnect weather-local\nparam t_inspect f:85\ninput load store asset readings {alias:owner-tag}/load\ninput ambient related weather-local\ninput temps store asset readings {asset}/temp window=3600000\noutput health asset health {asset}/health\n";
        let spec = parse_service_payload(text).unwrap();
        assert_eq!(spec.compute, "transformer-health");
        assert_eq!(spec.model_mdb_name.as_deref(), Some("asset"));
        assert!(spec.connections.contains(&ProviderId::from("weather-local")));
        assert_eq!(spec.params["t_inspect"], Value::F64(85.0));
        assert_eq!(spec.inputs.len(), 3);
        match &spec.inputs[2] {
            ServiceSpecInput::Store { window_ms, .. } => assert_eq!(*window_ms, Some(3_600_000)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(spec.outputs.len(), 1);

        assert!(parse_service_payload("input x store a b c\n").is_err(), "missing compute");
        assert!(parse_service_payload("compute c\ninput x tele a b\n").is_err());
        assert!(parse_service_payload("compute c\nparam k notvalue\n").is_err());
        assert!(parse_service_payload("compute a\ncompute b\n").is_err());
    }

    #[test]
    fn app_payload_parses() {
        let text = "on-event asset readings */temp scheme=owner-tag invoke transformer-health\non-work assess-asset invoke transformer-health\non-schedule daily submit-work fleet work local-1 assess-asset asset=s:tx-17\non-event asset health * observe\n";
        let spec = parse_app_payload(text).unwrap();
        assert_eq!(spec.rules.len(), 4);
        match &spec.rules[0] {
            AppSpecRule::OnEvent { scheme, action, .. } => {
                assert_eq!(scheme.as_deref(), Some("owner-tag"));
                assert!(matches!(action, AppSpecAction::Invoke { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        match &spec.rules[2] {
            AppSpecRule::OnSchedule { action, .. } => match action {
                AppSpecAction::SubmitWork { params, target_tier, .. } => {
                    assert_eq!(params["asset"], Value::Str("tx-17".to_string()));
                    assert_eq!(target_tier, &TierId::from("local-1"));
                }
                other => panic!("unexpected {other:?}"),
            },
            other => panic!("unexpected {other:?}"),
        }

        assert!(parse_app_payload("on-event a b\n").is_err());
        assert!(parse_app_payload("on-work op dance\n").is_err());
        assert!(parse_app_payload("at-noon x observe\n").is_err());
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = content_hash("");
        assert_eq!(h.len(), 64);
        assert_eq!(
            h,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_ne!(content_hash("a"), content_hash("b"));
    }
}
