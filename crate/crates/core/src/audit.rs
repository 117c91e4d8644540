//! Simulation-wide audit trail.
//!
//! Every observable action appends one entry: deliveries, rule firings,
//! store access by framework actors, provider fetches, link transfers,
//! work transitions, deployments. Tests lean on this trail to prove
//! isolation (framework actors touch only their home tier), policy
//! safety (every foreign record entered through an allowed transfer), and
//! end-to-end flows.

use crate::events::EventOp;
use crate::ids::{
    AppId, EventId, LinkId, MdbId, PrincipalId, ProviderId, ReplicaId, ServiceId, StoreId,
    SubscriptionId, TierId,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AuditEvent {
    EventDelivered {
        sub_id: SubscriptionId,
        mdb: MdbId,
        store: StoreId,
        event_id: EventId,
        op: EventOp,
        key: String,
        handler: String,
    },
    DeliveryFailed {
        sub_id: SubscriptionId,
        mdb: MdbId,
        event_id: EventId,
        reason: String,
    },
    RuleFired {
        tier: TierId,
        app: AppId,
        rule: String,
        action: String,
    },
    StoreRead {
        tier: TierId,
        principal: PrincipalId,
        mdb: MdbId,
        store: StoreId,
        pattern: String,
    },
    StoreWritten {
        tier: TierId,
        principal: PrincipalId,
        mdb: MdbId,
        store: StoreId,
        key: String,
        ts: i64,
        revision: u64,
    },
    RelatedFetched {
        tier: TierId,
        service: ServiceId,
        provider: ProviderId,
        points: usize,
    },
    Transfer {
        link: LinkId,
        from: MdbId,
        to: MdbId,
        store: StoreId,
        key: String,
        ts: i64,
        origin: ReplicaId,
        origin_clock: u64,
        revision: u64,
        synthesized: bool,
        applied: bool,
    },
    LinkSkipped {
        link: LinkId,
        reason: String,
    },
    WorkTransition {
        request: String,
        tier: TierId,
        from: String,
        to: String,
    },
    Deployed {
        tier: TierId,
        name: String,
        version: String,
        kind: String,
        conventional: bool,
    },
    ScheduleFired {
        tier: TierId,
        tag: String,
    },
}

impl AuditEvent {
    /// Coarse label for filtering in reports and queries.
    pub fn label(&self) -> &'static str {
        match self {
            AuditEvent::EventDelivered { .. } => "event_delivered",
            AuditEvent::DeliveryFailed { .. } => "delivery_failed",
            AuditEvent::RuleFired { .. } => "rule_fired",
            AuditEvent::StoreRead { .. } => "store_read",
            AuditEvent::StoreWritten { .. } => "store_written",
            AuditEvent::RelatedFetched { .. } => "related_fetched",
            AuditEvent::Transfer { .. } => "transfer",
            AuditEvent::LinkSkipped { .. } => "link_skipped",
            AuditEvent::WorkTransition { .. } => "work_transition",
            AuditEvent::Deployed { .. } => "deployed",
            AuditEvent::ScheduleFired { .. } => "schedule_fired",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuditLog {
    entries: Vec<AuditEvent>,
}

impl AuditLog {
    pub fn push(&mut self, event: AuditEvent) {
        self.entries.push(event);
    }

    pub fn entries(&self) -> &[AuditEvent] {
        &self.entries
    }

    pub fn with_label<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a AuditEvent> {
        self.entries.iter().filter(move |e| e.label() == label)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_filter() {
        let mut log = AuditLog::default();
        log.push(AuditEvent::ScheduleFired {
            tier: TierId::from("plant-a"),
            tag: "daily".to_string(),
        });
        log.push(AuditEvent::LinkSkipped {
            link: LinkId::from("l1"),
            reason: "down".to_string(),
        });
        log.push(AuditEvent::ScheduleFired {
            tier: TierId::from("plant-b"),
            tag: "daily".to_string(),
        });
        assert_eq!(log.with_label("schedule_fired").count(), 2);
        assert_eq!(log.with_label("link_skipped").count(), 1);
        assert_eq!(log.len(), 3);
    }
}
