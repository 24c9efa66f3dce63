//! Routing telemetry and the analyses built on it.

mod analyses;
mod dispatch;
pub mod export;
mod telemetry;

pub use analyses::{
    activation_histogram, bin_histogram, domain_routing_mass, expert_domain_matrix, group_mass, null_skip_profile,
    ExpertDomainMatrix,
};
pub use dispatch::{lpt_assign, plan_dispatch, plan_from_loads, DispatchPlan, DispatchPrior};
pub use telemetry::{LayerCounters, RoutingTelemetry, WEIGHT_SCALE};
