//! The over-the-link contact protocol.

pub mod frame;
pub mod link;
pub mod session;

#[cfg(test)]
mod tests;

pub use frame::{Frame, FrameError, FrameReader};
pub use link::{apply_with, run_budgeted_contact, Applied, ContactOutcome, Endpoint};
pub use session::{
    plan_transfer, Action, ChunkSource, Event, LocalView, PeerHolding, Phase, PlanEntry, Session,
    SessionConfig, TransferPlan,
};
