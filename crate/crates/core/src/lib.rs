//! Dynamic-capacity mixture-of-experts.
//!
//! Top-P routing over routed, shared and null experts; a toy multi-channel
//! decoder hosting MoE blocks; dense-to-MoE checkpoint fusion; the staged
//! specialist/warmup/joint curriculum; and routing analytics.

pub mod analytics;
pub mod curriculum;
pub mod error;
pub mod fusion;
pub mod model;
pub mod moe;
pub mod numcore;

pub use error::{Error, Result};
pub use numcore::{Graph, ParamSet, Rng, Tensor, Var};
