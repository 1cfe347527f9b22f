//! Delay-tolerant digital learning nodes.
//!
//! Rural schools, vehicle-mounted data mules and an urban Internet gateway
//! exchange bundles over short, unpredictable contacts. This crate holds the
//! persistent bundle store, the contact protocol, role-based routing, the
//! content and topic-request application, the urban fetch gateway and a
//! deterministic simulator of the bus-route deployment.

pub mod bundle;
mod codec;
pub mod content;
pub mod gateway;
pub mod node;
pub mod proto;
pub mod ranges;
pub mod routing;
pub mod sim;
pub mod store;

/// Milliseconds, either since the Unix epoch (daemon) or since simulation start.
pub type Millis = u64;

pub use bundle::{Bundle, BundleId, BundleKind, BundleMeta, NodeId, NodeRole, Priority};
pub use store::BundleStore;
