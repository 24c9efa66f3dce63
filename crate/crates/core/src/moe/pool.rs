use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::moe::routing::Router;
use crate::numcore::{ops, Graph, Rng, Tensor, Var};

/// How null-expert probability mass enters the mixing-weight normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullMass {
    /// Null experts stay in the denominator; selecting one attenuates the
    /// routed contribution.
    #[default]
    Attenuate,
    /// Weights are renormalized over the selected routed experts only.
    Exclude,
}

/// Shape and routing parameters of one MoE layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_routed: usize,
    pub n_null: usize,
    pub n_shared: usize,
    /// Intermediate width of each routed expert.
    pub routed_hidden: usize,
    /// Intermediate width of each shared expert.
    pub shared_hidden: usize,
    pub router: Router,
    #[serde(default)]
    pub null_mass: NullMass,
}

impl MoeConfig {
    pub fn pool_size(&self) -> usize {
        self.n_routed + self.n_null
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_routed == 0 {
            return Err(Error::Config("an MoE layer needs at least one routed expert".into()));
        }
        if self.routed_hidden == 0 || (self.n_shared > 0 && self.shared_hidden == 0) {
            return Err(Error::Config("expert intermediate width must be positive".into()));
        }
        self.router.validate(self.pool_size())
    }
}

/// Two-layer GELU feed-forward block mapping `d → hidden → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn init(d: usize, hidden: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            w1: Tensor::randn(&[d, hidden], std, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, d], std, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[d, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = self.w1.dims2()?;
        if self.b1.shape() != [h] || self.w2.shape() != [h, d] || self.b2.shape() != [d] {
            return Err(shape_err!(
                "ffn shapes w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            ));
        }
        Ok(())
    }

    /// Direct evaluation without a tape.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = ops::matmul(x, &self.w1)?;
        let hn = self.hidden();
        for i in 0..h.shape()[0] {
            for (v, b) in h.row_mut(i).iter_mut().zip(self.b1.data()) {
                *v = ops::gelu_scalar(*v + b);
            }
        }
        debug_assert_eq!(h.shape()[1], hn);
        let mut y = ops::matmul(&h, &self.w2)?;
        for i in 0..y.shape()[0] {
            for (v, b) in y.row_mut(i).iter_mut().zip(self.b2.data()) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> FfnVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        FfnVars { w1: leaf(&self.w1), b1: leaf(&self.b1), w2: leaf(&self.w2), b2: leaf(&self.b2) }
    }
}

/// Tape handles of an FFN's parameters.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add_bias(h, self.b1)?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, self.w2)?;
        g.add_bias(y, self.b2)
    }
}

/// Routed experts, shared experts, null-expert count and gate of one layer.
///
/// Gate column `i < n_routed` scores routed expert `i`; the last `n_null`
/// columns score the null experts.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPool {
    pub config: MoeConfig,
    pub gate: Tensor,
    pub routed: Vec<FfnParams>,
    pub shared: Vec<FfnParams>,
}

/// Tape handles of an [`ExpertPool`].
#[derive(Clone, Debug)]
pub struct PoolVars {
    pub gate: Var,
    pub routed: Vec<FfnVars>,
    pub shared: Vec<FfnVars>,
}

impl ExpertPool {
    /// Fresh pool: gate entries `N(0, gate_std²)`, expert weights `N(0, ffn_std²)`.
    pub fn init(config: MoeConfig, d: usize, gate_std: f64, ffn_std: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let gate = Tensor::randn(&[d, config.pool_size()], gate_std, rng);
        let routed = (0..config.n_routed).map(|_| FfnParams::init(d, config.routed_hidden, ffn_std, rng)).collect();
        let shared = (0..config.n_shared).map(|_| FfnParams::init(d, config.shared_hidden, ffn_std, rng)).collect();
        Ok(Self { config, gate, routed, shared })
    }

    pub fn d_model(&self) -> usize {
        self.gate.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (d, e) = self.gate.dims2()?;
        if e != self.config.pool_size() {
            return Err(shape_err!("gate has {e} columns for a pool of {}", self.config.pool_size()));
        }
        if self.routed.len() != self.config.n_routed || self.shared.len() != self.config.n_shared {
            return Err(shape_err!("expert counts disagree with config"));
        }
        for f in self.routed.iter().chain(&self.shared) {
            f.validate()?;
            if f.d_model() != d {
                return Err(shape_err!("expert width {} in a {d}-wide pool", f.d_model()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PoolVars {
        PoolVars {
            gate: if trainable { g.param(self.gate.clone()) } else { g.constant(self.gate.clone()) },
            routed: self.routed.iter().map(|f| f.bind(g, trainable)).collect(),
            shared: self.shared.iter().map(|f| f.bind(g, trainable)).collect(),
        }
    }
}
