//! Structural change events and subscriptions.
//!
//! Events describe that a record changed, never what it now contains:
//! there is no value field. Interested parties read the store after
//! delivery, under their own grants. Reads are silent and a merge that
//! keeps the local version emits nothing.
//!
//! Each microdatabase numbers its events from 1 in emission order, so
//! (mdb, event_id) delivery order is per-store FIFO.

use crate::ids::{AppId, EventId, MdbId, StoreId, SubscriptionId, TierId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventOp {
    Created,
    Updated,
    Deleted,
    /// Applied from a replication batch rather than a local call. Losing
    /// or identical merges emit nothing.
    Replicated,
}

impl EventOp {
    pub fn name(&self) -> &'static str {
        match self {
            EventOp::Created => "created",
            EventOp::Updated => "updated",
            EventOp::Deleted => "deleted",
            EventOp::Replicated => "replicated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: EventId,
    pub mdb_id: MdbId,
    pub store_id: StoreId,
    pub op: EventOp,
    pub key: String,
    pub ts: i64,
    pub revision: u64,
}

/// Where a delivery goes. Callbacks carry an opaque tag for reporting;
/// the callable itself lives outside this struct (in the runtime) so
/// subscriptions stay comparable and serializable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandlerRef {
    App { tier: TierId, app: AppId },
    Callback { tier: TierId, tag: String },
}

impl HandlerRef {
    pub fn tier(&self) -> &TierId {
        match self {
            HandlerRef::App { tier, .. } => tier,
            HandlerRef::Callback { tier, .. } => tier,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            HandlerRef::App { tier, app } => format!("app {tier}/{app}"),
            HandlerRef::Callback { tier, tag } => format!("callback {tier}/{tag}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: SubscriptionId,
    pub principal: crate::ids::PrincipalId,
    pub mdb_id: MdbId,
    pub store_id: StoreId,
    pub key_glob: String,
    pub handler: HandlerRef,
}

/// A delivery that failed; pumping records these and moves on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryFailure {
    pub sub_id: SubscriptionId,
    pub event_id: EventId,
    pub mdb_id: MdbId,
    pub reason: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_have_no_value_field() {
        let e = Event {
            event_id: 1,
            mdb_id: MdbId::from("plant-a/asset"),
            store_id: StoreId::from("readings"),
            op: EventOp::Created,
            key: "tx-17/temp".to_string(),
            ts: 1000,
            revision: 1,
        };
        let json = serde_json::to_value(&e).unwrap();
        let obj = json.as_object().unwrap();
        assert!(!obj.contains_key("value"));
        let mut fields: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
        fields.sort_unstable();
        assert_eq!(
            fields,
            vec!["event_id", "key", "mdb_id", "op", "revision", "store_id", "ts"]
        );
    }

    #[test]
    fn handler_tier_is_uniform() {
        let t = TierId::from("plant-a");
        let h = HandlerRef::App {
            tier: t.clone(),
            app: AppId::from("app-asset"),
        };
        assert_eq!(h.tier(), &t);
        let c = HandlerRef::Callback {
            tier: t.clone(),
            tag: "probe".to_string(),
        };
        assert_eq!(c.tier(), &t);
        assert_eq!(c.describe(), "callback plant-a/probe");
    }
}
