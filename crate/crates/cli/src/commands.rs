use std::fs;
use std::path::{Path, PathBuf};

use dynmoe::analytics::export::{expert_domain_rows, histogram_rows, null_skip_rows, to_csv};
use dynmoe::analytics::{plan_dispatch, DispatchPrior, RoutingTelemetry};
use dynmoe::curriculum::{self, evaluate, specialist_file, Datasets, EvalReport, LossTrace, StageOutput};
use dynmoe::fusion::Checkpoint;
use dynmoe::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::run::{RunContext, CONFIG_FILE, DATA_DIR};

#[derive(Serialize, Deserialize)]
struct EvalRow {
    domain: String,
    loss: f64,
    positions: u64,
}

#[derive(Serialize, Deserialize)]
struct CompareRow {
    domain: String,
    loss_a: f64,
    loss_b: f64,
    delta: f64,
    regression: bool,
}

#[derive(Serialize)]
struct RoutingSummary {
    mean_routed_active: f64,
    null_rate: f64,
}

#[derive(Serialize)]
struct CompareReport<'a> {
    a: &'a str,
    b: &'a str,
    tolerance: f64,
    rows: &'a [CompareRow],
    routing_a: Option<RoutingSummary>,
    routing_b: Option<RoutingSummary>,
}

#[derive(Serialize)]
struct LossSummaryRow {
    trace: String,
    stage: String,
    steps: usize,
    first_total: f64,
    last_total: f64,
    mean_last_10_total: f64,
}

fn stem(name: &str) -> String {
    Path::new(name).file_stem().map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned())
}

fn producer(name: &str) -> String {
    match name {
        "fused" => "fuse".into(),
        "warmup" => "train-warmup".into(),
        "joint" => "train-joint".into(),
        "dense_baseline" => "train-dense-baseline".into(),
        n => match n.strip_prefix("specialist_") {
            Some(d) => format!("train-specialist --domain {d}"),
            None => "the stage that writes it".into(),
        },
    }
}

fn check_compatible(ckpt: &Checkpoint, data: &Datasets, label: &str) -> Result<()> {
    let (c, m) = (ckpt.config(), &data.manifest);
    if c.vocab_size != m.vocab_size || c.n_channels != m.n_channels || c.max_seq_len < m.len_max {
        return Err(Error::Config(format!(
            "{label}: model (vocab {}, {} channels, max length {}) does not match the data (vocab {}, {} channels, length {})",
            c.vocab_size, c.n_channels, c.max_seq_len, m.vocab_size, m.n_channels, m.len_max
        )));
    }
    Ok(())
}

/// Held-out evaluation, plus routing telemetry for MoE models.
fn eval_model(ctx: &RunContext, ckpt: &Checkpoint, data: &Datasets) -> Result<(EvalReport, Option<RoutingTelemetry>)> {
    let domains = ctx.config.domains();
    let mut tel = ckpt.config().moe.as_ref().map(|m| RoutingTelemetry::new(m.n_routed, m.n_null, domains.to_vec()));
    let report = evaluate(&ckpt.model, &data.eval_all(), domains, ctx.config.eval_batch_size, tel.as_mut())?;
    Ok((report, tel))
}

fn eval_rows(report: &EvalReport) -> Result<Vec<EvalRow>> {
    report
        .domains
        .iter()
        .enumerate()
        .map(|(d, name)| Ok(EvalRow { domain: name.clone(), loss: report.loss(d)?, positions: report.positions[d] }))
        .collect()
}

fn print_eval(label: &str, report: &EvalReport) -> Result<()> {
    println!("{label}");
    println!("  {:<8} {:>10} {:>10}", "domain", "loss", "positions");
    for r in eval_rows(report)? {
        println!("  {:<8} {:>10.5} {:>10}", r.domain, r.loss, r.positions);
    }
    Ok(())
}

/// Writes the eval CSV (and telemetry for MoE models) for `name`.
fn write_eval(ctx: &RunContext, name: &str, ckpt: &Checkpoint, data: &Datasets) -> Result<Vec<String>> {
    let (report, tel) = eval_model(ctx, ckpt, data)?;
    print_eval(&format!("held-out loss: {name}"), &report)?;
    let mut files = vec![ctx.write_text(&format!("eval_{name}.csv"), &to_csv(&eval_rows(&report)?)?)?];
    if let Some(t) = tel {
        files.push(ctx.write_text(&format!("telemetry_eval_{name}.json"), &t.to_json()?)?);
    }
    Ok(files)
}

fn write_stage(ctx: &RunContext, name: &str, out: &StageOutput, data: &Datasets) -> Result<Vec<String>> {
    let mut files = vec![
        ctx.save_checkpoint(name, &out.checkpoint)?,
        ctx.write_text(&format!("trace_{name}.csv"), &out.trace.to_csv()?)?,
    ];
    if let Some(t) = &out.telemetry {
        files.push(ctx.write_text(&format!("telemetry_{name}.json"), &t.to_json()?)?);
    }
    files.extend(write_eval(ctx, name, &out.checkpoint, data)?);
    Ok(files)
}

pub fn gen_data(ctx: &RunContext) -> Result<()> {
    let data = Datasets::generate(&ctx.config.data)?;
    ctx.ensure_out()?;
    // build the dataset beside its final location, then swap it in
    let staging = ctx.path(".data.partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    data.save(&staging)?;
    let target = ctx.path(DATA_DIR);
    if target.exists() {
        fs::remove_dir_all(&target)?;
    }
    fs::rename(&staging, &target)?;
    let cfg_file = ctx.write_text(CONFIG_FILE, &ctx.config_text)?;
    let mut artifacts = vec![cfg_file, format!("{DATA_DIR}/manifest.json")];
    artifacts.extend(ctx.config.domains().iter().map(|d| format!("{DATA_DIR}/domain_{d}.json")));
    for (name, s) in ctx.config.domains().iter().zip(&data.splits) {
        log::info!("domain {name}: {} raw, {} balanced, {} held-out", s.raw.len(), s.balanced.len(), s.eval.len());
    }
    ctx.write_manifest("gen-data", &[], &artifacts)
}

pub fn train_specialist(ctx: &RunContext, domain: &str) -> Result<()> {
    let idx = ctx.config.domains().iter().position(|d| d == domain).ok_or_else(|| {
        Error::Config(format!("unknown domain {domain:?}; expected one of {:?}", ctx.config.domains()))
    })?;
    let data = ctx.load_data()?;
    let out = curriculum::train_specialist(&ctx.config, &data, idx)?;
    let files = write_stage(ctx, &format!("specialist_{domain}"), &out, &data)?;
    ctx.write_manifest(&format!("train-specialist-{domain}"), &[DATA_DIR.into()], &files)
}

pub fn fuse(ctx: &RunContext) -> Result<()> {
    let mut specialists = Vec::new();
    for d in ctx.config.domains() {
        specialists.push(ctx.load_stage(&format!("specialist_{d}"), &producer(&format!("specialist_{d}")))?);
    }
    let (fused, report) = curriculum::fuse_specialists(&ctx.config, &specialists)?;
    println!("fused {} specialists; max split-sum residual {:.3e}", specialists.len(), report.max_residual);
    let paths: Vec<PathBuf> = ctx.config.domains().iter().map(|d| PathBuf::from(specialist_file(d))).collect();
    let files = vec![
        ctx.save_checkpoint("fused", &fused)?,
        ctx.write_text("fusion_report.json", &serde_json::to_string_pretty(&report)?)?,
        ctx.write_text("fusion_plan.toml", &curriculum::fusion_plan(&ctx.config, &paths).to_toml()?)?,
    ];
    let inputs: Vec<String> = ctx.config.domains().iter().map(|d| specialist_file(d)).collect();
    ctx.write_manifest("fuse", &inputs, &files)
}

pub fn train_warmup(ctx: &RunContext) -> Result<()> {
    let fused = ctx.load_stage("fused", &producer("fused"))?;
    let data = ctx.load_data()?;
    let out = curriculum::train_warmup(&ctx.config, &fused, &data)?;
    let files = write_stage(ctx, "warmup", &out, &data)?;
    ctx.write_manifest("train-warmup", &["fused.ckpt".into(), DATA_DIR.into()], &files)
}

pub fn train_joint(ctx: &RunContext) -> Result<()> {
    let warm = ctx.load_stage("warmup", &producer("warmup"))?;
    let data = ctx.load_data()?;
    let out = curriculum::train_joint(&ctx.config, &warm, &data)?;
    let files = write_stage(ctx, "joint", &out, &data)?;
    ctx.write_manifest("train-joint", &["warmup.ckpt".into(), DATA_DIR.into()], &files)
}

pub fn train_dense_baseline(ctx: &RunContext) -> Result<()> {
    let data = ctx.load_data()?;
    let out = curriculum::train_dense_baseline(&ctx.config, &data)?;
    let files = write_stage(ctx, "dense_baseline", &out, &data)?;
    ctx.write_manifest("train-dense-baseline", &[DATA_DIR.into()], &files)
}

pub fn eval(ctx: &RunContext, name: &str) -> Result<()> {
    let ckpt = ctx.load_stage(name, &producer(name))?;
    let data = ctx.load_data()?;
    check_compatible(&ckpt, &data, name)?;
    let label = stem(name);
    let files = write_eval(ctx, &label, &ckpt, &data)?;
    ctx.write_manifest(&format!("eval-{label}"), &[ctx.checkpoint_path(name).display().to_string()], &files)
}

fn files_with(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            n.starts_with(prefix) && n.ends_with(ext)
        })
        .collect();
    v.sort();
    Ok(v)
}

pub fn analyze(ctx: &RunContext, telemetry: &[PathBuf], devices: usize) -> Result<()> {
    if !ctx.out.is_dir() {
        return Err(Error::Missing(format!("run directory {} — run `gen-data` first", ctx.out.display())));
    }
    let inputs = if telemetry.is_empty() { files_with(&ctx.out, "telemetry_", ".json")? } else { telemetry.to_vec() };
    if inputs.is_empty() {
        return Err(Error::Missing(
            "no telemetry files — run `train-warmup`, `train-joint` or `eval` on an MoE checkpoint first".into(),
        ));
    }
    let mut artifacts = Vec::new();
    for path in &inputs {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(format!("telemetry file {}", path.display()))
            } else {
                e.into()
            }
        })?;
        let tel = RoutingTelemetry::from_json(&text)?;
        let name = stem(&path.to_string_lossy());
        let name = name.strip_prefix("telemetry_").unwrap_or(&name);
        let dir = format!("analysis/{name}");
        artifacts.push(ctx.write_text(&format!("{dir}/histogram.csv"), &to_csv(&histogram_rows(&tel)?)?)?);
        artifacts.push(ctx.write_text(&format!("{dir}/expert_domain.csv"), &to_csv(&expert_domain_rows(&tel)?)?)?);
        artifacts.push(ctx.write_text(&format!("{dir}/null_skip.csv"), &to_csv(&null_skip_rows(&tel)?)?)?);
        let plan = plan_dispatch(DispatchPrior::Telemetry(&tel), devices)?;
        artifacts.push(ctx.write_text(&format!("{dir}/dispatch.json"), &plan.to_json()?)?);
        println!(
            "{name}: dispatch over {devices} devices, {} experts each, imbalance {:.4}, cross-device share {:.4}",
            plan.experts_per_device, plan.imbalance, plan.cross_device_share
        );
    }
    let mut summary = Vec::new();
    for path in files_with(&ctx.out, "trace_", ".csv")? {
        let trace = LossTrace::from_csv(&fs::read_to_string(&path)?)?;
        let (Some(first), Some(last)) = (trace.rows.first(), trace.rows.last()) else { continue };
        let tail: Vec<f64> = trace.rows.iter().rev().take(10).map(|r| r.total).collect();
        summary.push(LossSummaryRow {
            trace: stem(&path.to_string_lossy()).trim_start_matches("trace_").to_string(),
            stage: last.stage.clone(),
            steps: trace.rows.len(),
            first_total: first.total,
            last_total: last.total,
            mean_last_10_total: tail.iter().sum::<f64>() / tail.len() as f64,
        });
    }
    if !summary.is_empty() {
        artifacts.push(ctx.write_text("analysis/loss_summary.csv", &to_csv(&summary)?)?);
    }
    let inputs: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    ctx.write_manifest("analyze", &inputs, &artifacts)
}

fn routing_summary(tel: &RoutingTelemetry) -> RoutingSummary {
    let (mut active, mut null, mut tokens) = (0u64, 0u64, 0u64);
    for c in tel.layers.values() {
        active += c.active_hist.iter().enumerate().map(|(k, &n)| k as u64 * n).sum::<u64>();
        null += c.null_tokens.iter().sum::<u64>();
        tokens += c.total_tokens();
    }
    let t = tokens.max(1) as f64;
    RoutingSummary { mean_routed_active: active as f64 / t, null_rate: null as f64 / t }
}

pub fn compare(ctx: &RunContext, a: &str, b: &str, tolerance: f64) -> Result<()> {
    if !(tolerance >= 0.0) {
        return Err(Error::Config(format!("tolerance {tolerance} must be nonnegative")));
    }
    let ca = ctx.load_stage(a, &producer(a))?;
    let cb = ctx.load_stage(b, &producer(b))?;
    let (ma, mb) = (ca.config(), cb.config());
    if ma.vocab_size != mb.vocab_size || ma.n_channels != mb.n_channels {
        return Err(Error::Config(format!("{a} and {b} have incompatible vocabularies or channel counts")));
    }
    let data = ctx.load_data()?;
    check_compatible(&ca, &data, a)?;
    check_compatible(&cb, &data, b)?;
    let (ra, ta) = eval_model(ctx, &ca, &data)?;
    let (rb, tb) = eval_model(ctx, &cb, &data)?;
    let rows: Vec<CompareRow> = ctx
        .config
        .domains()
        .iter()
        .enumerate()
        .map(|(d, name)| {
            let (la, lb) = (ra.loss(d)?, rb.loss(d)?);
            Ok(CompareRow { domain: name.clone(), loss_a: la, loss_b: lb, delta: lb - la, regression: lb - la > tolerance })
        })
        .collect::<Result<_>>()?;
    let (sa, sb) = (stem(a), stem(b));
    println!("{sa} vs {sb}");
    println!("  {:<8} {:>10} {:>10} {:>10}", "domain", &sa, &sb, "delta");
    for r in &rows {
        let flag = if r.regression { "  REGRESSION" } else { "" };
        println!("  {:<8} {:>10.5} {:>10.5} {:>+10.5}{flag}", r.domain, r.loss_a, r.loss_b, r.delta);
    }
    let report = CompareReport {
        a: &sa,
        b: &sb,
        tolerance,
        rows: &rows,
        routing_a: ta.as_ref().map(routing_summary),
        routing_b: tb.as_ref().map(routing_summary),
    };
    let base = format!("compare_{sa}_vs_{sb}");
    let files = vec![
        ctx.write_text(&format!("{base}.csv"), &to_csv(&rows)?)?,
        ctx.write_text(&format!("{base}.json"), &serde_json::to_string_pretty(&report)?)?,
    ];
    let inputs = vec![ctx.checkpoint_path(a).display().to_string(), ctx.checkpoint_path(b).display().to_string()];
    ctx.write_manifest(&format!("compare-{sa}-vs-{sb}"), &inputs, &files)
}
