//! Cross-tier work requests.
//!
//! A work request is an ordinary record in a store of kind `work`: the key
//! is the request id, the timestamp is the submission time, and the value
//! is the JSON-encoded request. Every status change overwrites that one
//! record locally, so the revision climbs and last-writer-wins replication
//! carries the newest status across tiers like any other data.
//!
//! Status lifecycle:
//!
//! ```text
//! created -> dispatched -> accepted -> executing -> completed
//!     \           \                         \
//!      \           +----> failed            +-----> failed
//!       +-> failed
//! ```
//!
//! Expiry is a transition to `failed` with reason "expired", taken by the
//! requester while the request still sits in `created` or `dispatched`.

use crate::error::{Error, Result};
use crate::ids::{RequestId, TierId};
use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum WorkStatus {
    Created,
    Dispatched,
    Accepted,
    Executing,
    Completed { result: BTreeMap<String, Value> },
    Failed { reason: String },
}

impl WorkStatus {
    pub fn name(&self) -> &'static str {
        match self {
            WorkStatus::Created => "created",
            WorkStatus::Dispatched => "dispatched",
            WorkStatus::Accepted => "accepted",
            WorkStatus::Executing => "executing",
            WorkStatus::Completed { .. } => "completed",
            WorkStatus::Failed { .. } => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, WorkStatus::Completed { .. } | WorkStatus::Failed { .. })
    }

    /// Legal forward moves. Terminal states accept nothing.
    pub fn can_move_to(&self, next: &WorkStatus) -> bool {
        use WorkStatus::*;
        match (self, next) {
            (Created, Dispatched) => true,
            (Created, Failed { .. }) => true,
            (Dispatched, Accepted) => true,
            (Dispatched, Failed { .. }) => true,
            (Accepted, Executing) => true,
            (Accepted, Failed { .. }) => true,
            (Executing, Completed { .. }) => true,
            (Executing, Failed { .. }) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkRequest {
    pub request_id: RequestId,
    pub operation: String,
    pub params: BTreeMap<String, Value>,
    pub requester_tier: TierId,
    pub target_tier: TierId,
    pub submitted_ts: i64,
    pub status: WorkStatus,
}

impl WorkRequest {
    pub fn encode(&self) -> Value {
        Value::Str(serde_json::to_string(self).expect("work request serializes"))
    }

    pub fn decode(value: &Value) -> Result<WorkRequest> {
        match value {
            Value::Str(s) => serde_json::from_str(s)
                .map_err(|e| Error::InvalidValue(format!("work request payload: {e}"))),
            other => Err(Error::InvalidValue(format!(
                "work request must be a string value, got {}",
                other.kind().name()
            ))),
        }
    }

    pub fn transition(&self, next: WorkStatus) -> Result<WorkRequest> {
        if !self.status.can_move_to(&next) {
            return Err(Error::InvalidTransition {
                from: self.status.name().to_string(),
                to: next.name().to_string(),
            });
        }
        Ok(WorkRequest {
            status: next,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WorkRequest {
        WorkRequest {
            request_id: RequestId::from("req-1"),
            operation: "assess-asset".to_string(),
            params: BTreeMap::from([
                ("asset".to_string(), Value::Str("tx-17".to_string())),
            ]),
            requester_tier: TierId::from("regional-1"),
            target_tier: TierId::from("local-1"),
            submitted_ts: 5_000,
            status: WorkStatus::Created,
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let req = sample();
        let encoded = req.encode();
        assert!(matches!(encoded, Value::Str(_)));
        let back = WorkRequest::decode(&encoded).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn decode_rejects_non_string_and_garbage() {
        assert!(matches!(
            WorkRequest::decode(&Value::I64(5)).unwrap_err(),
            Error::InvalidValue(_)
        ));
        assert!(matches!(
            WorkRequest::decode(&Value::Str("not json".to_string())).unwrap_err(),
            Error::InvalidValue(_)
        ));
    }

    #[test]
    fn transition_matrix_is_exact() {
        use WorkStatus::*;
        let completed = Completed { result: BTreeMap::new() };
        let failed = Failed { reason: "x".to_string() };
        let states = [
            Created,
            Dispatched,
            Accepted,
            Executing,
            completed.clone(),
            failed.clone(),
        ];
        let allowed: &[(&WorkStatus, &WorkStatus)] = &[
            (&states[0], &states[1]),
            (&states[0], &failed),
            (&states[1], &states[2]),
            (&states[1], &failed),
            (&states[2], &states[3]),
            (&states[2], &failed),
            (&states[3], &completed),
            (&states[3], &failed),
        ];
        for from in &states {
            for to in &states {
                let want = allowed
                    .iter()
                    .any(|(f, t)| f.name() == from.name() && t.name() == to.name());
                assert_eq!(
                    from.can_move_to(to),
                    want,
                    "{} -> {}",
                    from.name(),
                    to.name()
                );
            }
        }
        // Terminal states reject everything, including themselves.
        for t in [&completed, &failed] {
            assert!(t.is_terminal());
            for to in &states {
                assert!(!t.can_move_to(to));
            }
        }
    }

    #[test]
    fn illegal_transition_surfaces_names() {
        let req = sample();
        let err = req
            .transition(WorkStatus::Executing)
            .unwrap_err();
        assert_eq!(
            err,
            Error::InvalidTransition {
                from: "created".to_string(),
                to: "executing".to_string()
            }
        );
    }

    #[test]
    fn expiry_is_a_failed_transition_with_reason() {
        let req = sample();
        let dispatched = req.transition(WorkStatus::Dispatched).unwrap();
        let expired = dispatched
            .transition(WorkStatus::Failed { reason: "expired".to_string() })
            .unwrap();
        assert_eq!(expired.status.name(), "failed");
        // Completed results survive the round trip through the store value.
        let exec = sample()
            .transition(WorkStatus::Dispatched)
            .unwrap()
            .transition(WorkStatus::Accepted)
            .unwrap()
            .transition(WorkStatus::Executing)
            .unwrap();
        let done = exec
            .transition(WorkStatus::Completed {
                result: BTreeMap::from([("health".to_string(), Value::F64(70.0))]),
            })
            .unwrap();
        let back = WorkRequest::decode(&done.encode()).unwrap();
        match back.status {
            WorkStatus::Completed { result } => {
                assert_eq!(result["health"], Value::F64(70.0));
            }
            other => panic!("expected completed, got {other:?}"),
        }
    }
}
