//! Deterministic simulator of mules cycling between fixed stops.
//!
//! Every node runs the real store, protocol, content and gateway code; the
//! only thing simulated is the link, which exists for the length of a contact
//! window and carries at most that window's byte budget.

mod config;
mod metrics;
mod oracle;
mod plan;
mod run;

pub use config::{
    budget, builtin, ms, CorpusConfig, Duration, Result, SimConfig, SimError, StopConfig, WorkloadEvent,
    CAMPUS_DEFAULT,
};
pub use metrics::{
    BundleRow, Conservation, ContactRow, Fate, FreshnessRow, RequestRow, SimReport, Summary, TransferRow,
};
pub use oracle::{analytic_bounds, mean_pickup_wait, pickup_wait};
pub use plan::{build_contact_plan, ContactWindow};
pub use run::{run_sim, SimRun};
