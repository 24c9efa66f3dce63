//! Dynamic-capacity mixture-of-experts layer.
//!
//! A softmax gate scores routed and null experts jointly. Each token takes the
//! smallest set of experts whose cumulative gate probability reaches `p`
//! (Top-P), so the number of active experts follows router confidence.
//! Selected routed experts are mixed with their renormalized probabilities;
//! null experts contribute zero, which lets a token skip routed compute.
//! Shared experts run on every token and are added unweighted.

mod layer;
mod pool;
mod routing;

pub use layer::{
    assignment_fractions, aux_load_balance_loss, mixing_set, moe_forward, AuxStats, LayerOutput, MoeForward,
};
pub use pool::{ExpertPool, FfnParams, FfnVars, MoeConfig, NullMass, PoolVars};
pub use routing::{
    gate, ranked, routed_active_bound, select_top_k, select_top_p, GateDistribution, Router, RoutingDecision,
    THRESHOLD_SLACK,
};
