//! Shape analyses over routing telemetry: activated-expert histograms,
//! expert-by-domain routing shares and null-expert skip rates.

use serde::{Deserialize, Serialize};

use crate::analytics::telemetry::RoutingTelemetry;
use crate::error::{Error, Result};

fn normalize(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn normalize_f(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v / total).collect()
}

/// Share of tokens at `layer` that activated exactly `k` routed experts,
/// for `k = 0..=n_routed`.
pub fn activation_histogram(tel: &RoutingTelemetry, layer: usize) -> Result<Vec<f64>> {
    let c = tel.layer(layer)?;
    if c.total_tokens() == 0 {
        return Err(Error::Empty(format!("layer {layer} saw no tokens")));
    }
    Ok(normalize(&c.active_hist))
}

/// Groups a histogram into inclusive `(lo, hi)` ranges of activated counts.
pub fn bin_histogram(dist: &[f64], bins: &[(usize, usize)]) -> Result<Vec<f64>> {
    bins.iter()
        .map(|&(lo, hi)| {
            if lo > hi || hi >= dist.len() {
                return Err(Error::Param(format!("bin {lo}..={hi} outside 0..={}", dist.len().saturating_sub(1))));
            }
            Ok(dist[lo..=hi].iter().sum())
        })
        .collect()
}

/// Routing shares, one row per `(layer, expert)`, normalized over domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertDomainMatrix {
    pub domains: Vec<String>,
    /// `(layer, expert)` for each row.
    pub rows: Vec<(usize, usize)>,
    /// `shares[row][domain]`; an expert that was never selected has an all-zero row.
    pub shares: Vec<Vec<f64>>,
}

pub fn expert_domain_matrix(tel: &RoutingTelemetry) -> Result<ExpertDomainMatrix> {
    if tel.is_empty() {
        return Err(Error::Empty("telemetry holds no tokens".into()));
    }
    let mut rows = Vec::new();
    let mut shares = Vec::new();
    for (&l, c) in &tel.layers {
        for (e, counts) in c.selections.iter().enumerate() {
            rows.push((l, e));
            shares.push(normalize(counts));
        }
    }
    Ok(ExpertDomainMatrix { domains: tel.domains.clone(), rows, shares })
}

/// `mass[domain][expert]`: fraction of a domain's routed mixing weight that
/// went to each routed expert at `layer`.
pub fn domain_routing_mass(tel: &RoutingTelemetry, layer: usize) -> Result<Vec<Vec<f64>>> {
    let c = tel.layer(layer)?;
    Ok((0..tel.n_domains())
        .map(|d| {
            let w: Vec<f64> = (0..tel.n_routed).map(|e| c.weight_fp[e][d] as f64).collect();
            normalize_f(&w)
        })
        .collect())
}

/// Layer-averaged share of domain `d`'s routed mass received by `experts`.
pub fn group_mass(tel: &RoutingTelemetry, domain: usize, experts: &[usize]) -> Result<f64> {
    if tel.layers.is_empty() {
        return Err(Error::Empty("telemetry holds no layers".into()));
    }
    let mut acc = 0.0;
    for &l in tel.layers.keys() {
        let m = domain_routing_mass(tel, l)?;
        acc += experts.iter().map(|&e| m[domain][e]).sum::<f64>();
    }
    Ok(acc / tel.layers.len() as f64)
}

/// `rate[layer][domain]`: share of the domain's tokens that selected at least
/// one null expert. Layers are listed in ascending order.
pub fn null_skip_profile(tel: &RoutingTelemetry) -> Result<Vec<(usize, Vec<f64>)>> {
    if tel.is_empty() {
        return Err(Error::Empty("telemetry holds no tokens".into()));
    }
    Ok(tel
        .layers
        .iter()
        .map(|(&l, c)| {
            let rates = c
                .null_tokens
                .iter()
                .zip(&c.tokens)
                .map(|(&n, &t)| if t == 0 { 0.0 } else { n as f64 / t as f64 })
                .collect();
            (l, rates)
        })
        .collect())
}
