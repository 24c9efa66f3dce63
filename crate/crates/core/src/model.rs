//! Toy decoder-only transformer with dense or MoE feed-forward blocks and one
//! output head per token channel.
//!
//! Each position carries `n_channels` token ids. Their embeddings are summed
//! with a learned position embedding, passed through pre-norm residual blocks
//! (RMS norm, causal multi-head attention, FFN or MoE), and every channel's
//! next token is predicted in parallel by its own head.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::moe::{moe_forward, AuxStats, ExpertPool, FfnParams, FfnVars, MoeConfig, PoolVars, RoutingDecision};
use crate::numcore::{Graph, ParamSet, Rng, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Vocabulary size of every channel.
    pub vocab_size: usize,
    pub n_channels: usize,
    pub max_seq_len: usize,
    /// Intermediate width of the dense FFN.
    pub ffn_hidden: usize,
    /// MoE settings shared by all layers; `None` builds a dense model.
    #[serde(default)]
    pub moe: Option<MoeConfig>,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale dense model: 4 layers, width 64, 4 heads, 2 channels of 64 tokens.
    pub fn desk_dense() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            vocab_size: 64,
            n_channels: 2,
            max_seq_len: 64,
            ffn_hidden: 256,
            moe: None,
            init_std: 0.02,
        }
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.n_channels == 0 {
            return Err(Error::Config("at least one channel is required".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        if let Some(m) = &self.moe {
            m.validate()?;
        }
        Ok(())
    }

    /// Canonical parameter names with shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v) = (self.d_model, self.vocab_size);
        let mut out = Vec::new();
        for c in 0..self.n_channels {
            out.push((format!("embed.tok.{c}"), vec![v, d]));
        }
        out.push(("embed.pos".into(), vec![self.max_seq_len, d]));
        let ffn = |prefix: String, h: usize, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}.w1"), vec![d, h]));
            out.push((format!("{prefix}.b1"), vec![h]));
            out.push((format!("{prefix}.w2"), vec![h, d]));
            out.push((format!("{prefix}.b2"), vec![d]));
        };
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.attn_norm.gain"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{l}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("layers.{l}.ffn_norm.gain"), vec![d]));
            match &self.moe {
                None => ffn(format!("layers.{l}.ffn"), self.ffn_hidden, &mut out),
                Some(m) => {
                    out.push((format!("layers.{l}.moe.gate"), vec![d, m.pool_size()]));
                    for i in 0..m.n_routed {
                        ffn(routed_prefix(l, i), m.routed_hidden, &mut out);
                    }
                    for s in 0..m.n_shared {
                        ffn(shared_prefix(l, s), m.shared_hidden, &mut out);
                    }
                }
            }
        }
        out.push(("final_norm.gain".into(), vec![d]));
        for c in 0..self.n_channels {
            out.push((format!("head.{c}"), vec![d, v]));
        }
        out
    }
}

pub fn routed_prefix(layer: usize, expert: usize) -> String {
    format!("layers.{layer}.moe.routed.{expert}")
}

pub fn shared_prefix(layer: usize, expert: usize) -> String {
    format!("layers.{layer}.moe.shared.{expert}")
}

pub fn dense_ffn_prefix(layer: usize) -> String {
    format!("layers.{layer}.ffn")
}

/// True for parameters of routed experts.
pub fn is_routed_param(name: &str) -> bool {
    name.contains(".moe.routed.")
}

/// True for gate matrices and shared-expert parameters.
pub fn is_gate_or_shared_param(name: &str) -> bool {
    name.ends_with(".moe.gate") || name.contains(".moe.shared.")
}

/// A batch of multi-channel sequences.
///
/// `tokens` is laid out `[batch][seq][channel]`. `loss_mask[b * seq + t]`
/// weights the prediction made at position `t` (of the tokens at `t + 1`);
/// the last position never has a target.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub channels: usize,
    pub tokens: Vec<u32>,
    pub domains: Vec<usize>,
    pub loss_mask: Vec<f64>,
}

impl Batch {
    pub fn token(&self, b: usize, t: usize, c: usize) -> usize {
        self.tokens[(b * self.seq + t) * self.channels + c] as usize
    }

    /// Domain label of every flattened position.
    pub fn token_domains(&self) -> Vec<usize> {
        (0..self.batch * self.seq).map(|r| self.domains[r / self.seq]).collect()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let rows = self.batch * self.seq;
        if self.batch == 0 || self.seq == 0 {
            return Err(Error::Empty("batch has no positions".into()));
        }
        if self.tokens.len() != rows * self.channels || self.loss_mask.len() != rows || self.domains.len() != self.batch {
            return Err(shape_err!("batch buffers disagree with {}x{}x{}", self.batch, self.seq, self.channels));
        }
        if self.channels != config.n_channels {
            return Err(shape_err!("{} channels for a {}-channel model", self.channels, config.n_channels));
        }
        if self.seq > config.max_seq_len {
            return Err(shape_err!("sequence length {} beyond maximum {}", self.seq, config.max_seq_len));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Index(format!("token {t} outside vocabulary of {}", config.vocab_size)));
        }
        Ok(())
    }

    /// Concatenates batches with equal sequence length and channel count.
    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let first = parts.first().ok_or_else(|| Error::Empty("no batches to concatenate".into()))?;
        let mut out = Batch { batch: 0, seq: first.seq, channels: first.channels, tokens: vec![], domains: vec![], loss_mask: vec![] };
        for p in parts {
            if p.seq != out.seq || p.channels != out.channels {
                return Err(shape_err!("cannot concatenate batches of different layout"));
            }
            out.batch += p.batch;
            out.tokens.extend_from_slice(&p.tokens);
            out.domains.extend_from_slice(&p.domains);
            out.loss_mask.extend_from_slice(&p.loss_mask);
        }
        Ok(out)
    }
}

/// Routing produced by one MoE layer during a forward pass.
#[derive(Debug)]
pub struct LayerRouting {
    pub layer: usize,
    pub decisions: Vec<RoutingDecision>,
    pub aux_stats: AuxStats,
    pub aux_loss: Var,
}

/// Tape-level forward result.
#[derive(Debug)]
pub struct Built {
    /// Per-channel logits, `(batch*seq) × vocab`.
    pub logits: Vec<Var>,
    pub routing: Vec<LayerRouting>,
}

/// Tape-level loss result.
#[derive(Debug)]
pub struct BuiltLoss {
    pub total: Var,
    pub primary: Var,
    pub aux: Var,
    pub per_channel: Vec<Var>,
    /// Per-channel logits, `(batch*seq) × vocab`.
    pub logits: Vec<Var>,
    pub routing: Vec<LayerRouting>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub primary: f64,
    pub aux: f64,
    pub per_channel: Vec<f64>,
}

/// Frozen per-layer routing for MoE layers, indexed by layer.
pub type FrozenRouting = Vec<Vec<RoutingDecision>>;

/// Result of a differentiated loss evaluation.
#[derive(Debug)]
pub struct LossAndGrads {
    pub loss: LossBreakdown,
    pub grads: IndexMap<String, Tensor>,
    pub routing: Vec<(usize, Vec<RoutingDecision>, AuxStats)>,
}

/// Decoder model: configuration plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl TransformerModel {
    /// Gaussian weights (`init_std`), unit norm gains, zero biases; MoE gates use std 0.02.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".moe.gate") {
                Tensor::randn(&shape, 0.02, rng)
            } else {
                Tensor::randn(&shape, config.init_std, rng)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!("{} tensors for a model of {}", params.len(), expected.len())));
        }
        for (name, shape) in &expected {
            let t = params.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != &shape[..] {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        // canonical order
        let params = expected.iter().map(|(n, _)| (n.clone(), params[n].clone())).collect();
        Ok(Self { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Param(format!("unknown parameter {name}")))
    }

    pub fn ffn(&self, prefix: &str) -> Result<FfnParams> {
        Ok(FfnParams {
            w1: self.param(&format!("{prefix}.w1"))?.clone(),
            b1: self.param(&format!("{prefix}.b1"))?.clone(),
            w2: self.param(&format!("{prefix}.w2"))?.clone(),
            b2: self.param(&format!("{prefix}.b2"))?.clone(),
        })
    }

    pub fn set_ffn(&mut self, prefix: &str, f: &FfnParams) -> Result<()> {
        for (suffix, t) in [("w1", &f.w1), ("b1", &f.b1), ("w2", &f.w2), ("b2", &f.b2)] {
            let slot = self
                .params
                .get_mut(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Param(format!("unknown parameter {prefix}.{suffix}")))?;
            if slot.shape() != t.shape() {
                return Err(shape_err!("{prefix}.{suffix}: {:?} vs {:?}", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Owned copy of one layer's expert pool.
    pub fn expert_pool(&self, layer: usize) -> Result<ExpertPool> {
        let cfg = self.config.moe.clone().ok_or_else(|| Error::Config("dense model has no expert pool".into()))?;
        Ok(ExpertPool {
            gate: self.param(&format!("layers.{layer}.moe.gate"))?.clone(),
            routed: (0..cfg.n_routed).map(|i| self.ffn(&routed_prefix(layer, i))).collect::<Result<_>>()?,
            shared: (0..cfg.n_shared).map(|s| self.ffn(&shared_prefix(layer, s))).collect::<Result<_>>()?,
            config: cfg,
        })
    }

    /// Binds every parameter onto `g`; names accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(n, t)| {
                let v = if trainable(n) { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect()
    }

    /// Records the forward pass for `batch` using bound parameters `vars`.
    pub fn build(
        &self,
        g: &mut Graph,
        vars: &IndexMap<String, Var>,
        batch: &Batch,
        frozen: Option<&FrozenRouting>,
    ) -> Result<Built> {
        let cfg = &self.config;
        batch.validate(cfg)?;
        let get = |n: &str| vars.get(n).copied().ok_or_else(|| Error::Param(format!("unbound parameter {n}")));
        let rows = batch.batch * batch.seq;

        let mut terms = Vec::with_capacity(cfg.n_channels + 1);
        for c in 0..cfg.n_channels {
            let ids: Vec<usize> = (0..rows).map(|r| batch.tokens[r * batch.channels + c] as usize).collect();
            terms.push(g.embedding(get(&format!("embed.tok.{c}"))?, &ids)?);
        }
        let pos_ids: Vec<usize> = (0..rows).map(|r| r % batch.seq).collect();
        terms.push(g.embedding(get("embed.pos")?, &pos_ids)?);
        let mut h = g.sum(&terms)?;

        let mut routing = Vec::new();
        for l in 0..cfg.n_layers {
            let at_layer = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("layer {l}: {m}")),
                other => other,
            };
            let p = |s: &str| get(&format!("layers.{l}.{s}"));
            let x = g.rms_norm(h, p("attn_norm.gain")?, NORM_EPS).map_err(at_layer)?;
            let q = g.matmul(x, p("attn.wq")?).map_err(at_layer)?;
            let k = g.matmul(x, p("attn.wk")?).map_err(at_layer)?;
            let v = g.matmul(x, p("attn.wv")?).map_err(at_layer)?;
            let a = g.causal_attention(q, k, v, batch.batch, batch.seq, cfg.n_heads).map_err(at_layer)?;
            let a = g.matmul(a, p("attn.wo")?).map_err(at_layer)?;
            h = g.add(h, a).map_err(at_layer)?;

            let x = g.rms_norm(h, p("ffn_norm.gain")?, NORM_EPS).map_err(at_layer)?;
            let ffn_vars = |prefix: &str| -> Result<FfnVars> {
                Ok(FfnVars {
                    w1: get(&format!("{prefix}.w1"))?,
                    b1: get(&format!("{prefix}.b1"))?,
                    w2: get(&format!("{prefix}.w2"))?,
                    b2: get(&format!("{prefix}.b2"))?,
                })
            };
            let y = match &cfg.moe {
                None => ffn_vars(&dense_ffn_prefix(l))?.forward(g, x).map_err(at_layer)?,
                Some(m) => {
                    let pool = PoolVars {
                        gate: p("moe.gate")?,
                        routed: (0..m.n_routed).map(|i| ffn_vars(&routed_prefix(l, i))).collect::<Result<_>>()?,
                        shared: (0..m.n_shared).map(|s| ffn_vars(&shared_prefix(l, s))).collect::<Result<_>>()?,
                    };
                    let fixed = frozen.map(|f| f[l].as_slice());
                    let fwd = moe_forward(g, m, &pool, x, fixed).map_err(at_layer)?;
                    routing.push(LayerRouting {
                        layer: l,
                        decisions: fwd.decisions,
                        aux_stats: fwd.aux_stats,
                        aux_loss: fwd.aux_loss,
                    });
                    fwd.output
                }
            };
            h = g.add(h, y).map_err(at_layer)?;
        }
        let h = g.rms_norm(h, get("final_norm.gain")?, NORM_EPS)?;
        let logits = (0..cfg.n_channels)
            .map(|c| g.matmul(h, get(&format!("head.{c}"))?))
            .collect::<Result<_>>()?;
        Ok(Built { logits, routing })
    }

    /// Records the loss `primary + aux_weight * mean_layers(aux)` on `g`.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        vars: &IndexMap<String, Var>,
        batch: &Batch,
        aux_weight: f64,
        frozen: Option<&FrozenRouting>,
    ) -> Result<BuiltLoss> {
        if !(aux_weight >= 0.0) {
            return Err(Error::Param(format!("aux weight {aux_weight} must be nonnegative")));
        }
        let built = self.build(g, vars, batch, frozen)?;
        let (rows, seq) = (batch.batch * batch.seq, batch.seq);
        let weights: Vec<f64> =
            (0..rows).map(|r| if r % seq + 1 < seq { batch.loss_mask[r] } else { 0.0 }).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Empty("loss mask selects no positions".into()));
        }
        let mut per_channel = Vec::with_capacity(self.config.n_channels);
        for (c, &logits) in built.logits.iter().enumerate() {
            let targets: Vec<usize> = (0..rows)
                .map(|r| if r % seq + 1 < seq { batch.tokens[(r + 1) * batch.channels + c] as usize } else { 0 })
                .collect();
            per_channel.push(g.cross_entropy(logits, &targets, &weights)?);
        }
        let s = g.sum(&per_channel)?;
        let primary = g.scale(s, 1.0 / per_channel.len() as f64)?;
        let aux = if built.routing.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let terms: Vec<Var> = built.routing.iter().map(|r| r.aux_loss).collect();
            let s = g.sum(&terms)?;
            g.scale(s, 1.0 / terms.len() as f64)?
        };
        let total = if aux_weight == 0.0 {
            primary
        } else {
            let weighted = g.scale(aux, aux_weight)?;
            g.add(primary, weighted)?
        };
        Ok(BuiltLoss { total, primary, aux, per_channel, logits: built.logits, routing: built.routing })
    }

    /// Logits `[batch, seq, channel, vocab]` and per-layer routing, without gradients.
    pub fn forward_logits(&self, batch: &Batch) -> Result<(Tensor, Vec<(usize, Vec<RoutingDecision>)>)> {
        self.forward_logits_with(batch, None)
    }

    /// [`Self::forward_logits`] with optionally frozen routing.
    pub fn forward_logits_with(
        &self,
        batch: &Batch,
        frozen: Option<&FrozenRouting>,
    ) -> Result<(Tensor, Vec<(usize, Vec<RoutingDecision>)>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, &|_| false);
        let built = self.build(&mut g, &vars, batch, frozen)?;
        let (rows, v, cn) = (batch.batch * batch.seq, self.config.vocab_size, self.config.n_channels);
        let mut out = vec![0.0; rows * cn * v];
        for (c, &lv) in built.logits.iter().enumerate() {
            let lt = g.value(lv);
            for r in 0..rows {
                out[(r * cn + c) * v..][..v].copy_from_slice(lt.row(r));
            }
        }
        let logits = Tensor::new(vec![batch.batch, batch.seq, cn, v], out)?;
        Ok((logits, built.routing.into_iter().map(|r| (r.layer, r.decisions)).collect()))
    }

    /// Loss values and routing without gradients.
    pub fn loss(&self, batch: &Batch, aux_weight: f64) -> Result<(LossBreakdown, Vec<(usize, Vec<RoutingDecision>, AuxStats)>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, &|_| false);
        let bl = self.build_loss(&mut g, &vars, batch, aux_weight, None)?;
        let loss = breakdown(&g, &bl);
        Ok((loss, bl.routing.into_iter().map(|r| (r.layer, r.decisions, r.aux_stats)).collect()))
    }

    /// Loss plus gradients of every parameter accepted by `trainable`.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        aux_weight: f64,
        trainable: &dyn Fn(&str) -> bool,
        frozen: Option<&FrozenRouting>,
    ) -> Result<LossAndGrads> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, trainable);
        let bl = self.build_loss(&mut g, &vars, batch, aux_weight, frozen)?;
        let loss = breakdown(&g, &bl);
        let mut raw = g.backward(bl.total)?;
        let grads = vars
            .iter()
            .filter(|(n, _)| trainable(n))
            .map(|(n, v)| {
                let t = raw.take(*v).unwrap_or_else(|| Tensor::zeros(self.params[n].shape()));
                (n.clone(), t)
            })
            .collect();
        let routing = bl.routing.into_iter().map(|r| (r.layer, r.decisions, r.aux_stats)).collect();
        Ok(LossAndGrads { loss, grads, routing })
    }
}

fn breakdown(g: &Graph, bl: &BuiltLoss) -> LossBreakdown {
    LossBreakdown {
        total: g.value(bl.total).item(),
        primary: g.value(bl.primary).item(),
        aux: g.value(bl.aux).item(),
        per_channel: bl.per_channel.iter().map(|v| g.value(*v).item()).collect(),
    }
}
