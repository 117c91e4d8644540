//! String-backed identifier newtypes.
//!
//! Every identifier in the system is an ordinary UTF-8 string; the newtypes
//! exist so a tier id cannot be passed where a store id is expected.
//! Microdatabase ids are globally unique and formatted as `<tier>/<name>`;
//! the replica id of a microdatabase equals its id, which is what the merge
//! tie-break sorts on.

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash,
            serde::Serialize, serde::Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(TierId);
id_type!(MdbId);
id_type!(StoreId);
id_type!(PrincipalId);
id_type!(ReplicaId);
id_type!(LinkId);
id_type!(CanonicalId);
id_type!(RequestId);
id_type!(ServiceId);
id_type!(AppId);
id_type!(ProviderId);

impl MdbId {
    /// Compose the globally unique id for a microdatabase named `name`
    /// living in `tier`.
    pub fn compose(tier: &TierId, name: &str) -> Self {
        Self(format!("{}/{}", tier.0, name))
    }

    /// The replica identity of this microdatabase instance.
    pub fn replica(&self) -> ReplicaId {
        ReplicaId(self.0.clone())
    }
}

/// Per-microdatabase event sequence number.
pub type EventId = u64;
/// Per-microdatabase subscription handle.
pub type SubscriptionId = u64;
/// Position in a mutation log.
pub type Seq = u64;
