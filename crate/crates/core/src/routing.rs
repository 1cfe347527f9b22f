//! Role-aware forwarding over the rural-mule-urban line topology.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bundle::{BundleMeta, NodeId, NodeRole};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RoutingError {
    #[error("unknown destination {0}")]
    UnknownDestination(NodeId),
    #[error("node {0} configured twice")]
    DuplicateNode(NodeId),
    #[error("topology has rural and urban nodes but no mule to connect them")]
    NoMule,
}

/// A node id together with its fixed role.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Peer {
    pub id: NodeId,
    pub role: NodeRole,
}

impl Peer {
    pub fn new(id: NodeId, role: NodeRole) -> Self {
        Peer { id, role }
    }
}

/// Where a bundle goes next from a given role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NextHop {
    /// Any node with this role.
    Role(NodeRole),
    /// Only the destination node itself.
    Destination(NodeId),
}

/// Static map of the deployment's nodes and roles.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RoleGraph {
    nodes: BTreeMap<NodeId, NodeRole>,
}

impl RoleGraph {
    pub fn new(nodes: impl IntoIterator<Item = (NodeId, NodeRole)>) -> Result<Self, RoutingError> {
        let mut map = BTreeMap::new();
        for (id, role) in nodes {
            if map.insert(id.clone(), role).is_some() {
                return Err(RoutingError::DuplicateNode(id));
            }
        }
        let has = |r| map.values().any(|&v| v == r);
        let stops = map.values().filter(|&&r| r != NodeRole::Mule).count();
        if stops > 1 && !has(NodeRole::Mule) {
            return Err(RoutingError::NoMule);
        }
        Ok(RoleGraph { nodes: map })
    }

    pub fn role_of(&self, id: &NodeId) -> Option<NodeRole> {
        self.nodes.get(id).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, NodeRole)> {
        self.nodes.iter().map(|(k, v)| (k, *v))
    }

    /// Rural and urban nodes hand everything to a mule; a mule carries a
    /// bundle until it meets the destination itself.
    pub fn next_hop(&self, from: NodeRole, destination: &NodeId) -> Result<NextHop, RoutingError> {
        if !self.nodes.contains_key(destination) {
            return Err(RoutingError::UnknownDestination(destination.clone()));
        }
        Ok(match from {
            NodeRole::Mule => NextHop::Destination(destination.clone()),
            NodeRole::Rural | NodeRole::Urban => NextHop::Role(NodeRole::Mule),
        })
    }

    /// True when `peer` is the destination or the next hop from `from` toward it.
    pub fn is_next_hop(
        &self,
        from: NodeRole,
        destination: &NodeId,
        peer: &Peer,
    ) -> Result<bool, RoutingError> {
        if &peer.id == destination {
            return Ok(true);
        }
        Ok(match self.next_hop(from, destination)? {
            NextHop::Role(r) => peer.role == r,
            NextHop::Destination(d) => peer.id == d,
        })
    }
}

/// Whether `local` should offer `bundle` to `peer`.
///
/// `received_from_peer` marks bundles that arrived from this same peer in the
/// current session; those are never bounced back.
pub fn should_offer(
    bundle: &BundleMeta,
    local: &Peer,
    peer: &Peer,
    graph: &RoleGraph,
    received_from_peer: bool,
) -> bool {
    if received_from_peer || bundle.destination == local.id || peer.id == local.id {
        return false;
    }
    match graph.is_next_hop(local.role, &bundle.destination, peer) {
        Ok(v) => v,
        Err(err) => {
            tracing::warn!(bundle = %bundle.id, %err, "retaining bundle with unknown destination");
            false
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OfferDecision {
    Accept,
    RejectDuplicate,
    RejectQuota,
}

/// What a node already holds of an offered bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalCopy {
    None,
    /// Space for the whole payload is already reserved.
    Partial,
    Complete,
}

pub fn accept_offer(bundle: &BundleMeta, local_copy: LocalCopy, free_quota: u64) -> OfferDecision {
    match local_copy {
        LocalCopy::Complete => OfferDecision::RejectDuplicate,
        LocalCopy::Partial => OfferDecision::Accept,
        LocalCopy::None if bundle.payload_len > free_quota => OfferDecision::RejectQuota,
        LocalCopy::None => OfferDecision::Accept,
    }
}
