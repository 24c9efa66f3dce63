//! Dense-to-MoE checkpoint surgery.
//!
//! Each source's FFN is cut along its intermediate dimension into `parts`
//! routed experts whose outputs sum back to the original FFN. Everything that
//! is not an FFN (embeddings, attention, norms, heads) is averaged across
//! sources. Gate and shared experts are freshly initialized.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::checkpoint::{Checkpoint, CheckpointMeta, StageTag};
use crate::model::{dense_ffn_prefix, is_routed_param, routed_prefix, shared_prefix, ModelConfig, TransformerModel};
use crate::moe::{FfnParams, MoeConfig, NullMass, Router};
use crate::numcore::{ParamSet, Rng, Tensor};

/// Splits an FFN into `parts` experts over contiguous intermediate blocks.
///
/// The up-projection's columns and the down-projection's rows are
/// partitioned; the output bias is divided equally, so the experts' outputs
/// sum exactly to the original FFN's output.
pub fn split_ffn(ffn: &FfnParams, parts: usize) -> Result<Vec<FfnParams>> {
    ffn.validate()?;
    let h = ffn.hidden();
    if parts == 0 || h % parts != 0 {
        return Err(Error::Param(format!("intermediate width {h} not divisible into {parts} parts")));
    }
    let w = h / parts;
    let b2 = ffn.b2.scale(1.0 / parts as f64);
    (0..parts)
        .map(|j| {
            let (lo, hi) = (j * w, (j + 1) * w);
            Ok(FfnParams {
                w1: ffn.w1.slice_cols(lo, hi)?,
                b1: Tensor::new(vec![w], ffn.b1.data()[lo..hi].to_vec())?,
                w2: ffn.w2.slice_rows(lo, hi),
                b2: if parts == 1 { ffn.b2.clone() } else { b2.clone() },
            })
        })
        .collect()
}

/// Elementwise mean of the named parameters across sources.
pub fn average_shared(sources: &[&ParamSet], names: &[String]) -> Result<ParamSet> {
    if sources.is_empty() {
        return Err(Error::Empty("no sources to average".into()));
    }
    let mut out = ParamSet::new();
    for name in names {
        let first = sources[0].get(name).ok_or_else(|| Error::Checkpoint(format!("source 0 lacks {name}")))?;
        let mut acc = Tensor::zeros(first.shape());
        for (s, src) in sources.iter().enumerate() {
            let t = src.get(name).ok_or_else(|| Error::Checkpoint(format!("source {s} lacks {name}")))?;
            if t.shape() != first.shape() {
                return Err(crate::error::shape_err!("{name}: shape {:?} in source {s}, {:?} in source 0", t.shape(), first.shape()));
            }
            acc.add_assign(t);
        }
        out.insert(name.clone(), acc.scale(1.0 / sources.len() as f64));
    }
    Ok(out)
}

fn default_parts() -> usize {
    2
}

fn default_gate_std() -> f64 {
    0.02
}

/// A dense source checkpoint and the domain it specializes in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSource {
    pub domain: String,
    pub path: PathBuf,
}

/// Declarative fusion recipe, read from TOML.
///
/// Source `s` contributes routed experts `parts*s .. parts*s + parts - 1`;
/// null experts follow the routed ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub sources: Vec<FusionSource>,
    #[serde(default = "default_parts")]
    pub parts: usize,
    pub n_null: usize,
    pub n_shared: usize,
    /// Shared-expert width; defaults to one routed expert's width.
    #[serde(default)]
    pub shared_hidden: Option<usize>,
    pub router: Router,
    #[serde(default)]
    pub null_mass: NullMass,
    #[serde(default = "default_gate_std")]
    pub gate_std: f64,
    pub seed: u64,
}

impl FusionPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Loads every source, resolving relative paths against `base`.
    pub fn load_sources(&self, base: &Path) -> Result<Vec<Checkpoint>> {
        self.sources
            .iter()
            .map(|s| {
                let p = if s.path.is_absolute() { s.path.clone() } else { base.join(&s.path) };
                Checkpoint::load(&p).map_err(|e| match e {
                    Error::Missing(_) => Error::Missing(format!("specialist checkpoint for domain {} at {}", s.domain, p.display())),
                    other => other,
                })
            })
            .collect()
    }
}

/// Split-sum residuals measured while fusing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    /// `residuals[s][l]`: max |sum of experts - dense FFN| for source `s`, layer `l`.
    pub residuals: Vec<Vec<f64>>,
    pub max_residual: f64,
    pub probe_tokens: usize,
    pub routed_weight_params: usize,
    pub source_ffn_weight_params: usize,
}

/// Builds the MoE checkpoint and its exactness report.
pub fn fuse(plan: &FusionPlan, sources: &[Checkpoint]) -> Result<(Checkpoint, FusionReport)> {
    if sources.is_empty() || sources.len() != plan.sources.len() {
        return Err(Error::Config(format!("plan lists {} sources, {} loaded", plan.sources.len(), sources.len())));
    }
    let dense = sources[0].config().clone();
    if dense.is_moe() {
        return Err(Error::Config("fusion sources must be dense models".into()));
    }
    for (s, c) in sources.iter().enumerate() {
        if c.config() != &dense {
            return Err(Error::Config(format!("source {s} ({}) has a different model config", plan.sources[s].domain)));
        }
    }
    if plan.parts == 0 || dense.ffn_hidden % plan.parts != 0 {
        return Err(Error::Config(format!("ffn width {} not divisible into {} parts", dense.ffn_hidden, plan.parts)));
    }
    let routed_hidden = dense.ffn_hidden / plan.parts;
    let moe = MoeConfig {
        n_routed: plan.parts * sources.len(),
        n_null: plan.n_null,
        n_shared: plan.n_shared,
        routed_hidden,
        shared_hidden: plan.shared_hidden.unwrap_or(routed_hidden),
        router: plan.router,
        null_mass: plan.null_mass,
    };
    let config = ModelConfig { moe: Some(moe.clone()), ..dense.clone() };
    config.validate()?;

    let mut rng = Rng::new(plan.seed);
    let mut model = TransformerModel::init(config, &mut rng)?;

    let shared_names: Vec<String> = dense
        .param_shapes()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !n.contains(".ffn."))
        .collect();
    let refs: Vec<&ParamSet> = sources.iter().map(Checkpoint::params).collect();
    for (name, t) in average_shared(&refs, &shared_names)? {
        model.params.insert(name, t);
    }

    let mut probe_rng = Rng::with_stream(plan.seed, 1);
    let probe_tokens = 64;
    let probe = Tensor::randn(&[probe_tokens, dense.d_model], 1.0, &mut probe_rng);
    let mut residuals = vec![vec![0.0; dense.n_layers]; sources.len()];
    let (mut routed_weights, mut source_weights) = (0, 0);
    for (s, src) in sources.iter().enumerate() {
        for l in 0..dense.n_layers {
            let ffn = src.model.ffn(&dense_ffn_prefix(l))?;
            source_weights += ffn.w1.len() + ffn.b1.len() + ffn.w2.len();
            let halves = split_ffn(&ffn, plan.parts)?;
            let reference = ffn.eval(&probe)?;
            let mut sum = Tensor::zeros(reference.shape());
            for (j, half) in halves.iter().enumerate() {
                sum.add_assign(&half.eval(&probe)?);
                routed_weights += half.w1.len() + half.b1.len() + half.w2.len();
                model.set_ffn(&routed_prefix(l, plan.parts * s + j), half)?;
            }
            residuals[s][l] = sum.max_abs_diff(&reference);
        }
    }
    for l in 0..dense.n_layers {
        for sh in 0..moe.n_shared {
            // fresh FFN init, matching the dense init scale
            let f = FfnParams::init(dense.d_model, moe.shared_hidden, dense.init_std, &mut rng);
            model.set_ffn(&shared_prefix(l, sh), &f)?;
        }
        let gate = Tensor::randn(&[dense.d_model, moe.pool_size()], plan.gate_std, &mut rng);
        model.params.insert(format!("layers.{l}.moe.gate"), gate);
    }

    let frozen = model.params.keys().filter(|n| is_routed_param(n)).cloned().collect();
    let meta = CheckpointMeta { stage: StageTag::Fused, domain: None, seed: plan.seed, step: 0, frozen };
    let max_residual = residuals.iter().flatten().copied().fold(0.0, f64::max);
    let report = FusionReport {
        residuals,
        max_residual,
        probe_tokens,
        routed_weight_params: routed_weights,
        source_ffn_weight_params: source_weights,
    };
    Ok((Checkpoint::new(model, meta), report))
}
