#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynmoe::analytics::export::{from_csv, to_csv, ExpertDomainRow, HistogramRow, NullSkipRow};
use dynmoe::analytics::{DispatchPlan, RoutingTelemetry};
use dynmoe::curriculum::{DatasetManifest, LossTrace};
use dynmoe::fusion::{Checkpoint, FusionReport};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const DOMAINS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub domain: String,
    pub loss: f64,
    pub positions: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub domain: String,
    pub loss_a: f64,
    pub loss_b: f64,
    pub delta: f64,
    pub regression: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSummaryRow {
    pub trace: String,
    pub stage: String,
    pub steps: usize,
    pub first_total: f64,
    pub last_total: f64,
    pub mean_last_10_total: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
}

pub fn dynmoe(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynmoe"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("DYNMOE_LOG", "warn")
        .output()
        .expect("spawn dynmoe")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every step of the smoke pipeline, in order. The dense baseline is not part
/// of it, so the comparison is warmup against joint.
pub fn pipeline_steps() -> Vec<Vec<&'static str>> {
    let mut steps = vec![vec!["gen-data"]];
    for d in DOMAINS {
        steps.push(vec!["train-specialist", "--domain", d]);
    }
    steps.extend([
        vec!["fuse"],
        vec!["train-warmup"],
        vec!["train-joint"],
        vec!["eval"],
        vec!["analyze"],
        vec!["compare", "--a", "warmup", "--b", "joint"],
    ]);
    steps
}

/// Runs the smoke pipeline into `out`, failing on the first nonzero exit.
pub fn run_pipeline(out: &Path) -> Result<(), String> {
    for step in pipeline_steps() {
        let o = dynmoe(out, &step);
        if !o.status.success() {
            return Err(format!("{step:?} exited with {:?}: {}", o.status.code(), stderr(&o)));
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// A CSV is schema-valid when it parses into its row type and serializes back
/// to the same bytes.
fn check_csv<T: Serialize + DeserializeOwned>(path: &Path) -> Result<usize, String> {
    let text = read(path)?;
    let rows: Vec<T> = from_csv(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let back = to_csv(&rows).map_err(|e| e.to_string())?;
    if back != text {
        return Err(format!("{} does not round-trip", path.display()));
    }
    Ok(rows.len())
}

fn check_json<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    serde_json::from_str(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

/// Checks the CSV and JSON written by `compare --a a --b b`.
pub fn check_compare(out: &Path, a: &str, b: &str) -> Result<(), String> {
    if check_csv::<CompareRow>(&out.join(format!("compare_{a}_vs_{b}.csv")))? != DOMAINS.len() {
        return Err("compare report needs one row per domain".into());
    }
    let report: serde_json::Value = check_json(&out.join(format!("compare_{a}_vs_{b}.json")))?;
    // routing stats are reported for MoE models and null for dense ones
    for (side, name) in [("routing_a", a), ("routing_b", b)] {
        let moe = !name.starts_with("dense") && !name.starts_with("specialist");
        if report[side]["mean_routed_active"].is_number() != moe {
            return Err(format!("compare report has unexpected {side} routing stats"));
        }
    }
    Ok(())
}

/// Checks the artifacts of `train-dense-baseline`.
pub fn check_dense_baseline(out: &Path) -> Result<(), String> {
    Checkpoint::load(&out.join("dense_baseline.ckpt")).map_err(|e| format!("dense_baseline.ckpt: {e}"))?;
    LossTrace::from_csv(&read(&out.join("trace_dense_baseline.csv"))?).map_err(|e| e.to_string())?;
    check_csv::<EvalRow>(&out.join("eval_dense_baseline.csv"))?;
    Ok(())
}

/// Validates every artifact a completed smoke pipeline should leave behind.
pub fn validate_artifacts(out: &Path) -> Result<(), String> {
    let data: DatasetManifest = check_json(&out.join("data/manifest.json"))?;
    if data.domains != DOMAINS {
        return Err(format!("unexpected domains {:?}", data.domains));
    }
    let mut stages: Vec<String> = DOMAINS.iter().map(|d| format!("specialist_{d}")).collect();
    stages.extend(["warmup", "joint"].map(String::from));
    for name in stages.iter().map(String::as_str).chain(["fused"]) {
        Checkpoint::load(&out.join(format!("{name}.ckpt"))).map_err(|e| format!("{name}.ckpt: {e}"))?;
    }
    for name in &stages {
        let trace = LossTrace::from_csv(&read(&out.join(format!("trace_{name}.csv")))?).map_err(|e| e.to_string())?;
        if trace.rows.is_empty() {
            return Err(format!("trace_{name}.csv is empty"));
        }
        if check_csv::<EvalRow>(&out.join(format!("eval_{name}.csv")))? != DOMAINS.len() {
            return Err(format!("eval_{name}.csv needs one row per domain"));
        }
    }
    let report: FusionReport = check_json(&out.join("fusion_report.json"))?;
    if !(report.max_residual < 1e-10) {
        return Err(format!("fusion residual {}", report.max_residual));
    }
    for tel in ["warmup", "joint", "eval_joint"] {
        let t = RoutingTelemetry::from_json(&read(&out.join(format!("telemetry_{tel}.json")))?).map_err(|e| e.to_string())?;
        if t.is_empty() {
            return Err(format!("telemetry_{tel}.json has no tokens"));
        }
        let dir = out.join("analysis").join(tel);
        check_csv::<HistogramRow>(&dir.join("histogram.csv"))?;
        check_csv::<ExpertDomainRow>(&dir.join("expert_domain.csv"))?;
        check_csv::<NullSkipRow>(&dir.join("null_skip.csv"))?;
        let plan = DispatchPlan::from_json(&read(&dir.join("dispatch.json"))?).map_err(|e| e.to_string())?;
        if plan.experts_per_device != 2 {
            return Err(format!("dispatch plan hosts {} experts per device", plan.experts_per_device));
        }
    }
    check_csv::<LossSummaryRow>(&out.join("analysis/loss_summary.csv"))?;
    check_compare(out, "warmup", "joint")?;
    for entry in fs::read_dir(out.join("manifests")).map_err(|e| e.to_string())? {
        let path: PathBuf = entry.map_err(|e| e.to_string())?.path();
        let m: RunManifest = check_json(&path)?;
        for a in &m.artifacts {
            if !out.join(a).exists() {
                return Err(format!("{} lists missing artifact {a}", m.command));
            }
        }
    }
    Ok(())
}
