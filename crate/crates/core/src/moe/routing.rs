//! Gate distribution and per-token expert selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ops, Tensor};

/// Slack allowed when comparing a cumulative probability against the
/// threshold. Absorbs summation-order rounding; far below any meaningful
/// probability gap.
pub const THRESHOLD_SLACK: f64 = 1e-12;

/// Per-token probabilities over the full expert pool (routed then null).
#[derive(Clone, Debug, PartialEq)]
pub struct GateDistribution {
    pub probs: Tensor,
}

impl GateDistribution {
    pub fn n_tokens(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn row(&self, token: usize) -> &[f64] {
        self.probs.row(token)
    }
}

/// Softmax of `x · gate_weights`, jointly over routed and null columns.
pub fn gate(gate_weights: &Tensor, x: &Tensor) -> Result<GateDistribution> {
    let logits = ops::matmul(x, gate_weights)?;
    Ok(GateDistribution { probs: ops::softmax_rows(&logits)? })
}

/// Experts chosen for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Expert indices in descending probability order (ties: lower index first).
    pub selected: Vec<usize>,
    /// Selected probabilities renormalized to sum to one, aligned with `selected`.
    pub mix_weights: Vec<f64>,
}

impl RoutingDecision {
    fn from_order(probs: &[f64], order: &[usize], len: usize) -> Self {
        let selected = order[..len].to_vec();
        let mass: f64 = selected.iter().map(|&i| probs[i]).sum();
        let mix_weights = selected.iter().map(|&i| probs[i] / mass).collect();
        Self { selected, mix_weights }
    }

    /// Count of selected experts that are routed (index below `n_routed`).
    pub fn n_routed_active(&self, n_routed: usize) -> usize {
        self.selected.iter().filter(|&&i| i < n_routed).count()
    }

    pub fn n_null_selected(&self, n_routed: usize) -> usize {
        self.selected.len() - self.n_routed_active(n_routed)
    }

    /// Raw probability mass of the selection.
    pub fn mass(&self, probs: &[f64]) -> f64 {
        self.selected.iter().map(|&i| probs[i]).sum()
    }
}

/// Expert indices sorted by descending probability; equal probabilities keep
/// ascending index order.
pub fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order
}

fn check_row(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Empty("empty probability row".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Param("probability row has negative or non-finite entries".into()));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Param(format!("probability row sums to {s}")));
    }
    Ok(())
}

/// Smallest set of experts whose cumulative probability reaches `p`.
///
/// Probabilities are ranked descending and the shortest qualifying prefix is
/// taken. A row whose total mass falls short of `p` through rounding selects
/// every expert.
pub fn select_top_p(probs: &[f64], p: f64) -> Result<RoutingDecision> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Param(format!("top-p threshold {p} outside (0, 1]")));
    }
    check_row(probs)?;
    let order = ranked(probs);
    let mut cum = 0.0;
    let mut len = order.len();
    for (n, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= p - THRESHOLD_SLACK {
            len = n + 1;
            break;
        }
    }
    Ok(RoutingDecision::from_order(probs, &order, len))
}

/// The `k` most probable experts.
pub fn select_top_k(probs: &[f64], k: usize) -> Result<RoutingDecision> {
    if k == 0 || k > probs.len() {
        return Err(Error::Param(format!("top-k of {k} over {} experts", probs.len())));
    }
    check_row(probs)?;
    Ok(RoutingDecision::from_order(probs, &ranked(probs), k))
}

/// Selection rule applied to every token of an MoE layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Router {
    /// Dynamic capacity: minimal set reaching cumulative probability `p`.
    TopP { p: f64 },
    /// Static capacity baseline.
    TopK { k: usize },
}

impl Router {
    pub fn select(&self, probs: &[f64]) -> Result<RoutingDecision> {
        match *self {
            Router::TopP { p } => select_top_p(probs, p),
            Router::TopK { k } => select_top_k(probs, k),
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        match *self {
            Router::TopP { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Param(format!("top-p threshold {p} outside (0, 1]")))
            }
            Router::TopK { k } if k == 0 || k > pool_size => {
                Err(Error::Param(format!("top-k of {k} over {pool_size} experts")))
            }
            _ => Ok(()),
        }
    }

    /// Largest possible count of routed experts one token can activate.
    pub fn max_routed_active(&self, n_routed: usize, n_null: usize) -> usize {
        match *self {
            Router::TopP { p } => routed_active_bound(p, n_routed, n_null),
            Router::TopK { k } => k.min(n_routed),
        }
    }
}

/// Upper bound on routed experts selected under Top-P:
/// `min(n_routed, ceil(p * (n_routed + n_null)))`.
pub fn routed_active_bound(p: f64, n_routed: usize, n_null: usize) -> usize {
    let pool = (n_routed + n_null) as f64;
    // ceil of a product that lands a hair above an integer through rounding
    let raw = (p * pool - 1e-9).ceil().max(0.0) as usize;
    raw.min(n_routed)
}
