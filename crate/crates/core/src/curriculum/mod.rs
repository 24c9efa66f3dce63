//! Synthetic multi-domain data and the staged training curriculum.

pub mod data;
mod pipeline;
mod trace;
mod train;

pub use data::{
    check_distinguishable, generate_domain, make_batch, transition_tv, DatasetManifest, Datasets, DomainSpec,
    DomainSplits, Sequence, MIN_DOMAIN_TV,
};
pub use pipeline::{
    base_model, fuse_specialists, fusion_plan, run_curriculum, specialist_file, train_dense_baseline, train_joint,
    train_specialist, train_warmup, CurriculumConfig, CurriculumRun, FusionSettings, Preset,
};
pub use trace::{LossTrace, TraceRow};
pub use train::{domain_losses, evaluate, train_stage, AdamW, EvalReport, Sampler, StageConfig, StageKind, StageOutput};
