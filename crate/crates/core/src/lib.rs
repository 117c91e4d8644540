//! Tiered data plane for composable industrial applications.
//!
//! The unit of state is the microdatabase: stores of immutable-identity
//! records under owner-controlled grants, described by an information
//! model, shared across tier links under EULA policies, and observed
//! through structural change events. A simulation runtime hosts tiers of
//! microdatabases, replicates between them over intermittently available
//! links, routes work requests across tiers, and runs apps and services
//! deployed from a catalog.

pub mod alias;
pub mod appstore;
pub mod audit;
pub mod error;
pub mod events;
pub mod framework;
pub mod glob;
pub mod ids;
pub mod mdb;
pub mod model;
pub mod policy;
pub mod record;
pub mod replication;
pub mod runtime;
pub mod snapshot;
pub mod store;
pub mod value;
pub mod version;
pub mod work;

pub use error::{Error, Result};
pub use ids::{
    AppId, CanonicalId, EventId, LinkId, MdbId, PrincipalId, ProviderId, ReplicaId, RequestId,
    Seq, ServiceId, StoreId, SubscriptionId, TierId,
};
pub use record::{merge, MergeDecision, Record};
pub use value::{Value, ValueKind};

#[cfg(test)]
mod tests {
    #[test]
    fn public_surface_is_wired() {
        let v = crate::Value::F64(1.5);
        assert_eq!(v.kind(), crate::ValueKind::Float);
        assert_eq!(crate::TierId::from("plant-a").as_str(), "plant-a");
    }
}
