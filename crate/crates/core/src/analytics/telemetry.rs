use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingDecision;

/// Mixing weights are accumulated in fixed point (units of 2^-32) so that
/// merging shards is exact and order independent.
pub const WEIGHT_SCALE: f64 = 4_294_967_296.0;

/// Counters for one MoE layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCounters {
    /// `selections[expert][domain]`: tokens of `domain` that selected `expert`.
    pub selections: Vec<Vec<u64>>,
    /// `weight_fp[expert][domain]`: summed mixing weight, fixed point.
    pub weight_fp: Vec<Vec<u64>>,
    /// `active_hist[k]`: tokens that activated exactly `k` routed experts.
    pub active_hist: Vec<u64>,
    /// Tokens seen per domain.
    pub tokens: Vec<u64>,
    /// Tokens per domain that selected at least one null expert.
    pub null_tokens: Vec<u64>,
    /// `co_selected[top][other]`: tokens whose highest-weight routed expert
    /// was `top` and which also selected routed expert `other`.
    pub co_selected: Vec<Vec<u64>>,
}

impl LayerCounters {
    fn new(pool: usize, n_routed: usize, n_domains: usize) -> Self {
        Self {
            selections: vec![vec![0; n_domains]; pool],
            weight_fp: vec![vec![0; n_domains]; pool],
            active_hist: vec![0; n_routed + 1],
            tokens: vec![0; n_domains],
            null_tokens: vec![0; n_domains],
            co_selected: vec![vec![0; n_routed]; n_routed],
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.iter().sum()
    }

    fn merge(&mut self, other: &LayerCounters) {
        fn add2(a: &mut [Vec<u64>], b: &[Vec<u64>]) {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
        }
        fn add1(a: &mut [u64], b: &[u64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        add2(&mut self.selections, &other.selections);
        add2(&mut self.weight_fp, &other.weight_fp);
        add1(&mut self.active_hist, &other.active_hist);
        add1(&mut self.tokens, &other.tokens);
        add1(&mut self.null_tokens, &other.null_tokens);
        add2(&mut self.co_selected, &other.co_selected);
    }
}

/// Routing counters indexed by layer, expert and domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingTelemetry {
    pub n_routed: usize,
    pub n_null: usize,
    pub domains: Vec<String>,
    pub layers: BTreeMap<usize, LayerCounters>,
}

impl RoutingTelemetry {
    pub fn new(n_routed: usize, n_null: usize, domains: Vec<String>) -> Self {
        Self { n_routed, n_null, domains, layers: BTreeMap::new() }
    }

    pub fn pool_size(&self) -> usize {
        self.n_routed + self.n_null
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.values().all(|c| c.total_tokens() == 0)
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerCounters> {
        self.layers.get(&layer).ok_or_else(|| Error::Param(format!("layer {layer} has no telemetry")))
    }

    /// Adds one layer's routing for a batch; `token_domains[t]` labels token `t`.
    pub fn record(&mut self, layer: usize, decisions: &[RoutingDecision], token_domains: &[usize]) -> Result<()> {
        if decisions.len() != token_domains.len() {
            return Err(crate::error::shape_err!("{} decisions for {} domain labels", decisions.len(), token_domains.len()));
        }
        let (pool, nr, nd) = (self.pool_size(), self.n_routed, self.n_domains());
        let c = self.layers.entry(layer).or_insert_with(|| LayerCounters::new(pool, nr, nd));
        for (d, &dom) in decisions.iter().zip(token_domains) {
            if dom >= nd {
                return Err(Error::Index(format!("domain {dom} of {nd}")));
            }
            c.tokens[dom] += 1;
            let mut active = 0;
            let mut any_null = false;
            let mut top: Option<(usize, f64)> = None;
            for (&e, &w) in d.selected.iter().zip(&d.mix_weights) {
                if e >= pool {
                    return Err(Error::Index(format!("expert {e} of {pool}")));
                }
                c.selections[e][dom] += 1;
                c.weight_fp[e][dom] += (w * WEIGHT_SCALE).round() as u64;
                if e < nr {
                    active += 1;
                    if top.map_or(true, |(_, tw)| w > tw) {
                        top = Some((e, w));
                    }
                } else {
                    any_null = true;
                }
            }
            c.active_hist[active] += 1;
            if any_null {
                c.null_tokens[dom] += 1;
            }
            if let Some((t, _)) = top {
                for &e in d.selected.iter().filter(|&&e| e < nr) {
                    c.co_selected[t][e] += 1;
                }
            }
        }
        Ok(())
    }

    /// Adds another shard's counters. Integer sums, so any merge order gives
    /// identical results.
    pub fn merge(&mut self, other: &RoutingTelemetry) -> Result<()> {
        if other.n_routed != self.n_routed || other.n_null != self.n_null || other.domains != self.domains {
            return Err(Error::Config("cannot merge telemetry of different pools or domains".into()));
        }
        let (pool, nr, nd) = (self.pool_size(), self.n_routed, self.n_domains());
        for (l, c) in &other.layers {
            self.layers.entry(*l).or_insert_with(|| LayerCounters::new(pool, nr, nd)).merge(c);
        }
        Ok(())
    }

    /// Total tokens per domain at the first recorded layer.
    pub fn domain_tokens(&self) -> Vec<u64> {
        self.layers.values().next().map_or_else(|| vec![0; self.n_domains()], |c| c.tokens.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
