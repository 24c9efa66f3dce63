//! Expert-parallel placement: assigns routed experts to devices with a fixed
//! number of experts per device, balancing expected load.

use serde::{Deserialize, Serialize};

use crate::analytics::telemetry::RoutingTelemetry;
use crate::error::{Error, Result};

/// Where expert loads come from.
#[derive(Clone, Copy, Debug)]
pub enum DispatchPrior<'a> {
    /// Every routed expert equally loaded; co-selection uniform over pairs.
    Uniform(usize),
    Telemetry(&'a RoutingTelemetry),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchPlan {
    pub n_devices: usize,
    pub experts_per_device: usize,
    /// `assignment[expert]` is the hosting device.
    pub assignment: Vec<usize>,
    /// Expected share of routed token-assignments handled by each device.
    pub device_load: Vec<f64>,
    /// max / mean device load.
    pub imbalance: f64,
    /// Share of routed token-assignments hosted off the token's home device
    /// (the device of its highest-weight expert).
    pub cross_device_share: f64,
}

impl DispatchPlan {
    pub fn max_load(&self) -> f64 {
        self.device_load.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Longest-processing-time placement under a fixed experts-per-device cap.
///
/// Experts are taken in descending load order (ties: lower index first) and
/// each goes to the least-loaded device that still has room (ties: lower
/// device index). Returns the expert-to-device map.
pub fn lpt_assign(loads: &[f64], n_devices: usize) -> Result<Vec<usize>> {
    let n = loads.len();
    if n_devices == 0 || n == 0 || n % n_devices != 0 {
        return Err(Error::Param(format!("{n} routed experts cannot be split evenly over {n_devices} devices")));
    }
    if loads.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::Param("expert loads must be finite and non-negative".into()));
    }
    let cap = n / n_devices;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| loads[b].total_cmp(&loads[a]));
    let mut dev_load = vec![0.0f64; n_devices];
    let mut dev_count = vec![0usize; n_devices];
    let mut assignment = vec![0; n];
    for e in order {
        let d = (0..n_devices)
            .filter(|&d| dev_count[d] < cap)
            .min_by(|&a, &b| dev_load[a].total_cmp(&dev_load[b]))
            .expect("capacity remains while experts remain");
        assignment[e] = d;
        dev_load[d] += loads[e];
        dev_count[d] += 1;
    }
    Ok(assignment)
}

/// Plans placement from explicit loads and an optional co-selection matrix
/// (`co[top][other]`, counts or weights). Without one, co-selection is taken
/// as uniform over all ordered expert pairs.
pub fn plan_from_loads(loads: &[f64], co_selected: Option<&[Vec<f64>]>, n_devices: usize) -> Result<DispatchPlan> {
    let assignment = lpt_assign(loads, n_devices)?;
    let n = loads.len();
    let total: f64 = loads.iter().sum();
    let mut device_load = vec![0.0; n_devices];
    for (e, &d) in assignment.iter().enumerate() {
        device_load[d] += if total > 0.0 { loads[e] / total } else { 1.0 / n as f64 };
    }
    let mean = device_load.iter().sum::<f64>() / n_devices as f64;
    let imbalance = if mean > 0.0 { device_load.iter().copied().fold(0.0, f64::max) / mean } else { 1.0 };

    let (mut off, mut all) = (0.0, 0.0);
    for top in 0..n {
        for other in 0..n {
            let w = match co_selected {
                Some(co) => co[top][other],
                None => 1.0,
            };
            all += w;
            if assignment[top] != assignment[other] {
                off += w;
            }
        }
    }
    let cross_device_share = if all > 0.0 { off / all } else { 0.0 };
    Ok(DispatchPlan {
        n_devices,
        experts_per_device: n / n_devices,
        assignment,
        device_load,
        imbalance,
        cross_device_share,
    })
}

/// Plans placement from telemetry (selection counts summed over layers) or a
/// uniform prior.
pub fn plan_dispatch(prior: DispatchPrior<'_>, n_devices: usize) -> Result<DispatchPlan> {
    match prior {
        DispatchPrior::Uniform(n_routed) => plan_from_loads(&vec![1.0; n_routed], None, n_devices),
        DispatchPrior::Telemetry(tel) => {
            if tel.is_empty() {
                return Err(Error::Empty("telemetry holds no tokens".into()));
            }
            let n = tel.n_routed;
            let mut loads = vec![0.0; n];
            let mut co = vec![vec![0.0; n]; n];
            for c in tel.layers.values() {
                for e in 0..n {
                    loads[e] += c.selections[e].iter().sum::<u64>() as f64;
                    for o in 0..n {
                        co[e][o] += c.co_selected[e][o] as f64;
                    }
                }
            }
            plan_from_loads(&loads, Some(&co), n_devices)
        }
    }
}
