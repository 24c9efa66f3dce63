//! Checkpoint storage and dense-to-MoE fusion.

mod checkpoint;
mod surgery;

pub use checkpoint::{Checkpoint, CheckpointMeta, StageTag, FORMAT_VERSION, MAGIC};
pub use surgery::{average_shared, fuse, split_ffn, FusionPlan, FusionReport, FusionSource};
