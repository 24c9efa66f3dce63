//! Single-stage training: AdamW with cosine learning-rate decay, a linearly
//! annealed load-balancing weight, and a per-stage trainable mask.

use std::f64::consts::PI;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::analytics::RoutingTelemetry;
use crate::curriculum::data::{make_batch, Sequence};
use crate::curriculum::trace::{LossTrace, TraceRow};
use crate::error::{Error, Result};
use crate::fusion::{Checkpoint, CheckpointMeta, StageTag};
use crate::model::{is_gate_or_shared_param, Batch, TransformerModel};
use crate::numcore::{ops, Graph, Rng, Tensor};

/// Which training stage is running; decides the trainable mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Dense model on one domain's raw pool.
    Specialist,
    /// Fused MoE, only gates and shared experts train.
    Warmup,
    /// Fused MoE, everything trains.
    Joint,
    /// Dense model on the mixed raw pools.
    DenseBaseline,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        self.tag().as_str()
    }

    pub fn tag(self) -> StageTag {
        match self {
            StageKind::Specialist => StageTag::Specialist,
            StageKind::Warmup => StageTag::Warmup,
            StageKind::Joint => StageTag::Joint,
            StageKind::DenseBaseline => StageTag::DenseBaseline,
        }
    }

    /// Whether parameter `name` is updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        match self {
            StageKind::Warmup => is_gate_or_shared_param(name),
            _ => true,
        }
    }

    fn wants_moe(self) -> bool {
        matches!(self, StageKind::Warmup | StageKind::Joint)
    }
}

fn d_min_lr_ratio() -> f64 {
    0.1
}
fn d_weight_decay() -> f64 {
    0.01
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.98
}
fn d_eps() -> f64 {
    1e-8
}
fn d_grad_clip() -> f64 {
    1.0
}
fn d_div_factor() -> f64 {
    10.0
}
fn d_div_patience() -> usize {
    100
}

/// Optimizer and schedule settings for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, decayed by a cosine to `lr * min_lr_ratio`.
    pub lr: f64,
    #[serde(default = "d_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "d_grad_clip")]
    pub grad_clip: f64,
    /// Load-balancing weight at the first step.
    pub aux_start: f64,
    /// Load-balancing weight at the last step.
    pub aux_end: f64,
    /// Abort when the loss stays above `divergence_factor` × the first
    /// step's loss for `divergence_patience` consecutive steps.
    #[serde(default = "d_div_factor")]
    pub divergence_factor: f64,
    #[serde(default = "d_div_patience")]
    pub divergence_patience: usize,
}

impl StageConfig {
    pub fn new(steps: usize, batch_size: usize, lr: f64, aux_start: f64, aux_end: f64) -> Self {
        Self {
            steps,
            batch_size,
            lr,
            min_lr_ratio: d_min_lr_ratio(),
            weight_decay: d_weight_decay(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            grad_clip: d_grad_clip(),
            aux_start,
            aux_end,
            divergence_factor: d_div_factor(),
            divergence_patience: d_div_patience(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!("learning rate {} / floor ratio {} invalid", self.lr, self.min_lr_ratio));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        if !(self.aux_start >= 0.0 && self.aux_end >= 0.0) || !self.aux_start.is_finite() || !self.aux_end.is_finite() {
            return bad(format!("aux weights {} → {} must be nonnegative", self.aux_start, self.aux_end));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be nonnegative".into());
        }
        Ok(())
    }

    /// Linear interpolation from `aux_start` (first step) to `aux_end` (last step).
    pub fn aux_weight(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.aux_start;
        }
        let f = step as f64 / (self.steps - 1) as f64;
        self.aux_start * (1.0 - f) + self.aux_end * f
    }

    /// Cosine decay from `lr` at step 0 toward `lr * min_lr_ratio`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.lr;
        }
        let cos = 0.5 * (1.0 + (PI * step as f64 / self.steps as f64).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".gain") || name.ends_with(".b1") || name.ends_with(".b2"))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    moments: IndexMap<String, (Tensor, Tensor)>,
    t: i32,
}

impl AdamW {
    pub fn new() -> Self {
        Self { moments: IndexMap::new(), t: 0 }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut IndexMap<String, Tensor>, grads: &IndexMap<String, Tensor>, cfg: &StageConfig, lr: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                *pi -= lr * (update + wd * *pi);
            }
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

/// Endless shuffled pass over a pool of sequences.
pub struct Sampler<'a> {
    pool: &'a [Sequence],
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(pool: &'a [Sequence], rng: Rng) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Empty("no training sequences".into()));
        }
        let mut s = Self { pool, order: (0..pool.len()).collect(), pos: 0, rng };
        s.rng.shuffle(&mut s.order);
        Ok(s)
    }

    pub fn next(&mut self, n: usize) -> Vec<&'a Sequence> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                &self.pool[self.order[self.pos - 1]]
            })
            .collect()
    }
}

/// Per-domain `(sum of channel-mean CE, predicted positions)` for one batch.
pub fn domain_losses(logits: &[&Tensor], batch: &Batch, n_domains: usize) -> Result<Vec<(f64, f64)>> {
    let (rows, seq, ch) = (batch.batch * batch.seq, batch.seq, batch.channels);
    let mut out = vec![(0.0, 0.0); n_domains];
    for (d, slot) in out.iter_mut().enumerate() {
        let weights: Vec<f64> = (0..rows)
            .map(|r| if r % seq + 1 < seq && batch.domains[r / seq] == d { batch.loss_mask[r] } else { 0.0 })
            .collect();
        let count: f64 = weights.iter().sum();
        if count <= 0.0 {
            continue;
        }
        let mut ce = 0.0;
        for (c, l) in logits.iter().enumerate() {
            let targets: Vec<usize> = (0..rows)
                .map(|r| if r % seq + 1 < seq { batch.tokens[(r + 1) * ch + c] as usize } else { 0 })
                .collect();
            ce += ops::weighted_cross_entropy(l, &targets, &weights)?;
        }
        *slot = (ce / logits.len() as f64 * count, count);
    }
    Ok(out)
}

/// Everything one stage produces.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
    /// Routing counters over all training batches (MoE stages only).
    pub telemetry: Option<RoutingTelemetry>,
    /// Training positions seen per domain.
    pub domain_tokens: Vec<u64>,
}

/// Trains `model` for `cfg.steps` steps on `data`.
///
/// Parameters outside the stage's mask are never written. The batch order
/// depends only on `(seed, stream)`.
pub fn train_stage(
    model: &TransformerModel,
    stage: StageKind,
    cfg: &StageConfig,
    data: &[Sequence],
    domains: &[String],
    seed: u64,
    stream: u64,
) -> Result<StageOutput> {
    cfg.validate()?;
    if stage.wants_moe() != model.config.is_moe() {
        let want = if stage.wants_moe() { "an MoE" } else { "a dense" };
        return Err(Error::Config(format!("{} stage needs {want} model", stage.as_str())));
    }
    if data.is_empty() {
        return Err(Error::Empty(format!("{} stage has no training data", stage.as_str())));
    }
    if let Some(s) = data.iter().find(|s| s.domain >= domains.len()) {
        return Err(Error::Index(format!("sequence of domain {} with {} domains", s.domain, domains.len())));
    }
    let trains = |n: &str| stage.trains(n);
    if !model.params.keys().any(|n| trains(n)) {
        return Err(Error::Config(format!("{} stage mask selects no parameters", stage.as_str())));
    }

    let mut current = model.clone();
    let mut telemetry = model.config.moe.as_ref().map(|m| RoutingTelemetry::new(m.n_routed, m.n_null, domains.to_vec()));
    let mut trace = LossTrace::new(domains.to_vec());
    let mut domain_tokens = vec![0u64; domains.len()];
    let mut opt = AdamW::new();
    let mut sampler = Sampler::new(data, Rng::with_stream(seed, stream))?;
    let mut initial: Option<f64> = None;
    let mut above = 0usize;

    for step in 0..cfg.steps {
        let batch = make_batch(&sampler.next(cfg.batch_size), current.config.n_channels)?;
        let aux_weight = cfg.aux_weight(step);
        let lr = cfg.learning_rate(step);

        let mut g = Graph::new();
        let vars = current.bind(&mut g, &trains);
        let bl = current.build_loss(&mut g, &vars, &batch, aux_weight, None)?;
        let mut grads = g.backward(bl.total)?;

        let logits: Vec<&Tensor> = bl.logits.iter().map(|&v| g.value(v)).collect();
        let per_domain = domain_losses(&logits, &batch, domains.len())?;
        for (r, d) in batch.token_domains().into_iter().enumerate() {
            if r % batch.seq + 1 < batch.seq && batch.loss_mask[r] > 0.0 {
                domain_tokens[d] += 1;
            }
        }
        if let Some(tel) = telemetry.as_mut() {
            let doms = batch.token_domains();
            for r in &bl.routing {
                tel.record(r.layer, &r.decisions, &doms)?;
            }
        }

        let mut step_grads: IndexMap<String, Tensor> = vars
            .iter()
            .filter(|(n, _)| trains(n))
            .map(|(n, v)| {
                let t = grads.take(*v).unwrap_or_else(|| Tensor::zeros(current.params[n].shape()));
                (n.clone(), t)
            })
            .collect();
        if cfg.grad_clip > 0.0 {
            let norm = step_grads.values().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("{} step {step}: gradient norm {norm}", stage.as_str())));
            }
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for t in step_grads.values_mut() {
                    *t = t.scale(s);
                }
            }
        }
        opt.step(&mut current.params, &step_grads, cfg, lr);

        let total = g.value(bl.total).item();
        trace.rows.push(TraceRow {
            step,
            stage: stage.as_str().to_string(),
            total,
            primary: g.value(bl.primary).item(),
            aux: g.value(bl.aux).item(),
            aux_weight,
            lr,
            domain_losses: per_domain.iter().map(|&(s, c)| (c > 0.0).then(|| s / c)).collect(),
        });

        let first = *initial.get_or_insert(total);
        above = if total > cfg.divergence_factor * first { above + 1 } else { 0 };
        if above >= cfg.divergence_patience {
            let tail = trace.tail_csv(5)?;
            return Err(Error::Diverged(format!(
                "{} stage: loss above {}x the initial {first:.4} for {above} steps (step {step}); recent trace:\n{tail}",
                stage.as_str(),
                cfg.divergence_factor
            )));
        }
        if let Some(p) = current.params.iter().find(|(n, t)| trains(n) && t.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("{} step {step}: parameter {} became non-finite", stage.as_str(), p.0)));
        }
    }

    let mut meta = CheckpointMeta::new(stage.tag(), seed);
    meta.step = cfg.steps as u64;
    Ok(StageOutput { checkpoint: Checkpoint::new(current, meta), trace, telemetry, domain_tokens })
}

/// Held-out loss per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub domains: Vec<String>,
    /// Mean next-token cross-entropy (averaged over channels); `None` when a
    /// domain had no sequences.
    pub losses: Vec<Option<f64>>,
    pub positions: Vec<u64>,
}

impl EvalReport {
    pub fn loss(&self, domain: usize) -> Result<f64> {
        self.losses
            .get(domain)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Empty(format!("no evaluation data for domain {domain}")))
    }
}

/// Evaluates `seqs` in fixed order, optionally recording routing telemetry.
pub fn evaluate(
    model: &TransformerModel,
    seqs: &[Sequence],
    domains: &[String],
    batch_size: usize,
    mut telemetry: Option<&mut RoutingTelemetry>,
) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let mut sums = vec![(0.0, 0.0); domains.len()];
    for chunk in seqs.chunks(batch_size) {
        let refs: Vec<&Sequence> = chunk.iter().collect();
        if let Some(s) = chunk.iter().find(|s| s.domain >= domains.len()) {
            return Err(Error::Index(format!("sequence of domain {} with {} domains", s.domain, domains.len())));
        }
        let batch = make_batch(&refs, model.config.n_channels)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, &|_| false);
        let built = model.build(&mut g, &vars, &batch, None)?;
        let logits: Vec<&Tensor> = built.logits.iter().map(|&v| g.value(v)).collect();
        for (acc, (s, c)) in sums.iter_mut().zip(domain_losses(&logits, &batch, domains.len())?) {
            acc.0 += s;
            acc.1 += c;
        }
        if let Some(tel) = telemetry.as_deref_mut() {
            let doms = batch.token_domains();
            for r in &built.routing {
                tel.record(r.layer, &r.decisions, &doms)?;
            }
        }
    }
    Ok(EvalReport {
        domains: domains.to_vec(),
        losses: sums.iter().map(|&(s, c)| (c > 0.0).then(|| s / c)).collect(),
        positions: sums.iter().map(|&(_, c)| c as u64).collect(),
    })
}
