//! CSV and JSON exports. Row order is deterministic (layer, then expert or
//! count, then domain) and floats use shortest round-trip formatting, so
//! export → parse → export reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analytics::analyses::{activation_histogram, expert_domain_matrix, null_skip_profile};
use crate::analytics::telemetry::{RoutingTelemetry, WEIGHT_SCALE};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramRow {
    pub layer: usize,
    pub n_active: usize,
    pub tokens: u64,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertDomainRow {
    pub layer: usize,
    pub expert: usize,
    /// "routed" or "null".
    pub kind: String,
    pub domain: String,
    pub selections: u64,
    pub weight_sum: f64,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NullSkipRow {
    pub layer: usize,
    pub domain: String,
    pub tokens: u64,
    pub null_tokens: u64,
    pub rate: f64,
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn histogram_rows(tel: &RoutingTelemetry) -> Result<Vec<HistogramRow>> {
    let mut rows = Vec::new();
    for (&l, c) in &tel.layers {
        let dist = activation_histogram(tel, l)?;
        for (k, (&tokens, &share)) in c.active_hist.iter().zip(&dist).enumerate() {
            rows.push(HistogramRow { layer: l, n_active: k, tokens, share });
        }
    }
    Ok(rows)
}

pub fn expert_domain_rows(tel: &RoutingTelemetry) -> Result<Vec<ExpertDomainRow>> {
    let m = expert_domain_matrix(tel)?;
    let mut rows = Vec::new();
    for (&(l, e), shares) in m.rows.iter().zip(&m.shares) {
        let c = &tel.layers[&l];
        for (d, name) in tel.domains.iter().enumerate() {
            rows.push(ExpertDomainRow {
                layer: l,
                expert: e,
                kind: if e < tel.n_routed { "routed" } else { "null" }.into(),
                domain: name.clone(),
                selections: c.selections[e][d],
                weight_sum: c.weight_fp[e][d] as f64 / WEIGHT_SCALE,
                share: shares[d],
            });
        }
    }
    Ok(rows)
}

pub fn null_skip_rows(tel: &RoutingTelemetry) -> Result<Vec<NullSkipRow>> {
    let mut rows = Vec::new();
    for (l, rates) in null_skip_profile(tel)? {
        let c = &tel.layers[&l];
        for (d, name) in tel.domains.iter().enumerate() {
            rows.push(NullSkipRow {
                layer: l,
                domain: name.clone(),
                tokens: c.tokens[d],
                null_tokens: c.null_tokens[d],
                rate: rates[d],
            });
        }
    }
    Ok(rows)
}

/// Writes `text` via a temporary sibling and rename.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
