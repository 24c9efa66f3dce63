//! The staged curriculum: per-domain dense specialists, fusion into an MoE,
//! gate/shared-expert warmup, then joint training; plus the naive dense
//! baseline trained on the mixed raw pools with the same step budget.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curriculum::data::{DatasetManifest, Datasets};
use crate::curriculum::train::{train_stage, StageConfig, StageKind, StageOutput};
use crate::error::{Error, Result};
use crate::fusion::{fuse, Checkpoint, FusionPlan, FusionReport, FusionSource, StageTag};
use crate::model::{ModelConfig, TransformerModel};
use crate::moe::{NullMass, Router};
use crate::numcore::Rng;

const STREAM_INIT: u64 = 7;
const STREAM_SPECIALIST: u64 = 100;
const STREAM_WARMUP: u64 = 200;
const STREAM_JOINT: u64 = 300;
const STREAM_BASELINE: u64 = 400;

/// Size preset for the whole pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Tiny model and corpus, 50 steps per stage.
    Smoke,
    /// Desk-scale model and corpus.
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Preset::Smoke),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected smoke or full)"))),
        }
    }
}

/// How specialists are turned into one MoE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSettings {
    pub parts: usize,
    pub n_null: usize,
    pub n_shared: usize,
    #[serde(default)]
    pub shared_hidden: Option<usize>,
    pub router: Router,
    #[serde(default)]
    pub null_mass: NullMass,
    pub gate_std: f64,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            parts: 2,
            n_null: 1,
            n_shared: 1,
            shared_hidden: None,
            router: Router::TopP { p: 0.7 },
            null_mass: NullMass::Attenuate,
            gate_std: 0.02,
        }
    }
}

/// Every knob of a curriculum run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub seed: u64,
    pub data: DatasetManifest,
    /// Dense architecture shared by specialists and the baseline.
    pub model: ModelConfig,
    pub fusion: FusionSettings,
    pub specialist: StageConfig,
    pub warmup: StageConfig,
    pub joint: StageConfig,
    /// Optimizer settings for the baseline; its step count is always the
    /// curriculum's total budget.
    pub dense_baseline: StageConfig,
    pub eval_batch_size: usize,
}

impl CurriculumConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::Smoke => {
                let data = DatasetManifest {
                    raw_counts: vec![80, 60, 50, 10],
                    balanced_per_domain: 20,
                    eval_per_domain: 10,
                    vocab_size: 32,
                    band_width: 8,
                    len_min: 12,
                    len_max: 12,
                    ..DatasetManifest::desk(seed)
                };
                let model = ModelConfig {
                    n_layers: 2,
                    d_model: 16,
                    n_heads: 2,
                    vocab_size: 32,
                    n_channels: 2,
                    max_seq_len: 16,
                    ffn_hidden: 32,
                    moe: None,
                    init_std: 0.02,
                };
                let mut cfg = Self {
                    seed,
                    data,
                    model,
                    fusion: FusionSettings::default(),
                    specialist: StageConfig::new(50, 8, 1e-3, 0.0, 0.0),
                    warmup: StageConfig::new(50, 8, 1e-2, 1e-2, 1e-2),
                    joint: StageConfig::new(50, 8, 1e-3, 1e-2, 1e-3),
                    dense_baseline: StageConfig::new(0, 8, 1e-3, 0.0, 0.0),
                    eval_batch_size: 16,
                };
                cfg.dense_baseline.steps = cfg.step_budget();
                cfg
            }
            Preset::Full => {
                let data = DatasetManifest::desk(seed);
                let model = ModelConfig {
                    n_layers: 4,
                    d_model: 32,
                    n_heads: 4,
                    vocab_size: 64,
                    n_channels: 2,
                    max_seq_len: 64,
                    ffn_hidden: 128,
                    moe: None,
                    init_std: 0.02,
                };
                let mut cfg = Self {
                    seed,
                    data,
                    model,
                    fusion: FusionSettings::default(),
                    specialist: StageConfig::new(300, 16, 1e-3, 0.0, 0.0),
                    warmup: StageConfig::new(300, 16, 1e-2, 1e-2, 1e-2),
                    joint: StageConfig::new(300, 16, 1e-3, 1e-2, 1e-3),
                    dense_baseline: StageConfig::new(0, 16, 1e-3, 0.0, 0.0),
                    eval_batch_size: 64,
                };
                cfg.dense_baseline.steps = cfg.step_budget();
                cfg
            }
        }
    }

    /// Total optimizer steps of the curriculum (all specialists, warmup, joint).
    pub fn step_budget(&self) -> usize {
        self.data.n_domains() * self.specialist.steps + self.warmup.steps + self.joint.steps
    }

    pub fn baseline_stage(&self) -> StageConfig {
        StageConfig { steps: self.step_budget(), ..self.dense_baseline.clone() }
    }

    pub fn domains(&self) -> &[String] {
        &self.data.domains
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.is_moe() {
            return Err(Error::Config("the curriculum's model section must describe the dense architecture".into()));
        }
        if self.model.vocab_size != self.data.vocab_size || self.model.n_channels != self.data.n_channels {
            return Err(Error::Config("model vocabulary/channels disagree with the data manifest".into()));
        }
        if self.model.max_seq_len < self.data.len_max {
            return Err(Error::Config(format!(
                "sequences of length {} exceed the model's maximum {}",
                self.data.len_max, self.model.max_seq_len
            )));
        }
        if self.fusion.parts == 0 || self.model.ffn_hidden % self.fusion.parts != 0 {
            return Err(Error::Config(format!(
                "ffn width {} not divisible into {} parts",
                self.model.ffn_hidden, self.fusion.parts
            )));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        for s in [&self.specialist, &self.warmup, &self.joint, &self.dense_baseline] {
            s.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// The common dense initialization every specialist and the baseline start from.
pub fn base_model(cfg: &CurriculumConfig) -> Result<TransformerModel> {
    TransformerModel::init(cfg.model.clone(), &mut Rng::with_stream(cfg.seed, STREAM_INIT))
}

fn check_data(cfg: &CurriculumConfig, data: &Datasets) -> Result<()> {
    if data.manifest != cfg.data {
        return Err(Error::Config("datasets were generated from a different manifest than the config's".into()));
    }
    Ok(())
}

fn expect_stage(ckpt: &Checkpoint, want: StageTag, needed_by: &str) -> Result<()> {
    if ckpt.meta.stage != want {
        return Err(Error::Config(format!(
            "{needed_by} needs a {} checkpoint, got {}",
            want.as_str(),
            ckpt.meta.stage.as_str()
        )));
    }
    Ok(())
}

/// Dense specialist for one domain, trained on that domain's raw pool only.
pub fn train_specialist(cfg: &CurriculumConfig, data: &Datasets, domain: usize) -> Result<StageOutput> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let name = cfg.domains().get(domain).ok_or_else(|| Error::Index(format!("domain {domain}")))?.clone();
    let mut out = train_stage(
        &base_model(cfg)?,
        StageKind::Specialist,
        &cfg.specialist,
        &data.splits[domain].raw,
        cfg.domains(),
        cfg.seed,
        STREAM_SPECIALIST + domain as u64,
    )?;
    out.checkpoint.meta.domain = Some(name);
    Ok(out)
}

/// Fusion recipe over the specialists at `paths` (in domain order).
pub fn fusion_plan(cfg: &CurriculumConfig, paths: &[PathBuf]) -> FusionPlan {
    let f = &cfg.fusion;
    FusionPlan {
        sources: cfg
            .domains()
            .iter()
            .zip(paths)
            .map(|(d, p)| FusionSource { domain: d.clone(), path: p.clone() })
            .collect(),
        parts: f.parts,
        n_null: f.n_null,
        n_shared: f.n_shared,
        shared_hidden: f.shared_hidden,
        router: f.router,
        null_mass: f.null_mass,
        gate_std: f.gate_std,
        seed: cfg.seed,
    }
}

pub fn specialist_file(domain: &str) -> String {
    format!("specialist_{domain}.ckpt")
}

/// Fuses specialists given in domain order.
pub fn fuse_specialists(cfg: &CurriculumConfig, specialists: &[Checkpoint]) -> Result<(Checkpoint, FusionReport)> {
    cfg.validate()?;
    if specialists.len() != cfg.domains().len() {
        return Err(Error::Config(format!("{} specialists for {} domains", specialists.len(), cfg.domains().len())));
    }
    for (s, name) in specialists.iter().zip(cfg.domains()) {
        expect_stage(s, StageTag::Specialist, "fusion")?;
        if s.meta.domain.as_deref() != Some(name.as_str()) {
            return Err(Error::Config(format!(
                "specialist for domain {name} is labelled {:?}",
                s.meta.domain.as_deref().unwrap_or("none")
            )));
        }
    }
    let paths: Vec<PathBuf> = cfg.domains().iter().map(|d| PathBuf::from(specialist_file(d))).collect();
    fuse(&fusion_plan(cfg, &paths), specialists)
}

/// Trains only gates and shared experts of the fused model on the warmup subset.
pub fn train_warmup(cfg: &CurriculumConfig, fused: &Checkpoint, data: &Datasets) -> Result<StageOutput> {
    cfg.validate()?;
    check_data(cfg, data)?;
    expect_stage(fused, StageTag::Fused, "warmup")?;
    train_stage(&fused.model, StageKind::Warmup, &cfg.warmup, &data.warmup_all(), cfg.domains(), cfg.seed, STREAM_WARMUP)
}

/// Trains every parameter of the warmed model on the full balanced set.
pub fn train_joint(cfg: &CurriculumConfig, warm: &Checkpoint, data: &Datasets) -> Result<StageOutput> {
    cfg.validate()?;
    check_data(cfg, data)?;
    expect_stage(warm, StageTag::Warmup, "joint training")?;
    train_stage(&warm.model, StageKind::Joint, &cfg.joint, &data.balanced_all(), cfg.domains(), cfg.seed, STREAM_JOINT)
}

/// One dense model trained on the mixed imbalanced raw pools for the whole
/// curriculum budget.
pub fn train_dense_baseline(cfg: &CurriculumConfig, data: &Datasets) -> Result<StageOutput> {
    cfg.validate()?;
    check_data(cfg, data)?;
    train_stage(
        &base_model(cfg)?,
        StageKind::DenseBaseline,
        &cfg.baseline_stage(),
        &data.raw_all(),
        cfg.domains(),
        cfg.seed,
        STREAM_BASELINE,
    )
}

/// Artifacts of a full curriculum run.
#[derive(Clone, Debug)]
pub struct CurriculumRun {
    pub specialists: Vec<StageOutput>,
    pub fused: Checkpoint,
    pub fusion_report: FusionReport,
    pub warmup: StageOutput,
    pub joint: StageOutput,
}

impl CurriculumRun {
    /// The seven checkpoints in pipeline order.
    pub fn checkpoints(&self) -> Vec<&Checkpoint> {
        let mut v: Vec<&Checkpoint> = self.specialists.iter().map(|s| &s.checkpoint).collect();
        v.extend([&self.fused, &self.warmup.checkpoint, &self.joint.checkpoint]);
        v
    }
}

fn persist(dir: Option<&Path>, file: &str, out: &StageOutput) -> Result<()> {
    if let Some(d) = dir {
        out.checkpoint.save(&d.join(format!("{file}.ckpt")))?;
        fs::write(d.join(format!("trace_{file}.csv")), out.trace.to_csv()?)?;
    }
    Ok(())
}

/// Specialists → fusion → warmup → joint. When `out_dir` is given every
/// checkpoint and trace is written as soon as its stage finishes, so a
/// failing stage leaves the earlier artifacts in place.
pub fn run_curriculum(cfg: &CurriculumConfig, data: &Datasets, out_dir: Option<&Path>) -> Result<CurriculumRun> {
    cfg.validate()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let mut specialists = Vec::new();
    for (i, name) in cfg.domains().iter().enumerate() {
        log::info!("training specialist {name}");
        let out = train_specialist(cfg, data, i)?;
        persist(out_dir, &format!("specialist_{name}"), &out)?;
        specialists.push(out);
    }
    let ckpts: Vec<Checkpoint> = specialists.iter().map(|s| s.checkpoint.clone()).collect();
    let (fused, fusion_report) = fuse_specialists(cfg, &ckpts)?;
    log::info!("fused {} specialists, max split residual {:.3e}", ckpts.len(), fusion_report.max_residual);
    if let Some(d) = out_dir {
        fused.save(&d.join("fused.ckpt"))?;
        fs::write(d.join("fusion_report.json"), serde_json::to_string_pretty(&fusion_report)?)?;
    }
    log::info!("warmup");
    let warmup = train_warmup(cfg, &fused, data)?;
    persist(out_dir, "warmup", &warmup)?;
    log::info!("joint training");
    let joint = train_joint(cfg, &warmup.checkpoint, data)?;
    persist(out_dir, "joint", &joint)?;
    Ok(CurriculumRun { specialists, fused, fusion_report, warmup, joint })
}
