//! Dynamic-capacity MoE forward pass and load-balancing loss.

use crate::error::{shape_err, Error, Result};
use crate::moe::pool::{ExpertPool, MoeConfig, NullMass, PoolVars};
use crate::moe::routing::{GateDistribution, RoutingDecision};
use crate::numcore::{Graph, Tensor, Var};

/// Batch statistics feeding the load-balancing loss, over the full pool
/// (routed then null).
#[derive(Clone, Debug, PartialEq)]
pub struct AuxStats {
    /// Share of all (token, selected expert) assignments that went to each expert.
    pub assign_frac: Vec<f64>,
    /// Mean gate probability of each expert over the batch.
    pub mean_prob: Vec<f64>,
}

/// Tape-level result of [`moe_forward`].
#[derive(Debug)]
pub struct MoeForward {
    pub output: Var,
    pub probs: Var,
    pub decisions: Vec<RoutingDecision>,
    pub aux_stats: AuxStats,
    /// `E * sum_i f_i * pbar_i`, differentiable through `pbar` only.
    pub aux_loss: Var,
}

/// Value-level layer result.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub output: Tensor,
    pub gate: GateDistribution,
    pub decisions: Vec<RoutingDecision>,
    pub aux_stats: AuxStats,
}

/// Switch-style balance penalty `E * sum_i f_i * pbar_i`.
///
/// Equals 1 under perfectly uniform routing and approaches `E` when every
/// assignment and all gate mass collapse onto one expert.
pub fn aux_load_balance_loss(stats: &AuxStats) -> Result<f64> {
    let e = stats.assign_frac.len();
    if e == 0 || stats.mean_prob.len() != e {
        return Err(Error::Empty("aux loss over an empty pool or batch".into()));
    }
    Ok(e as f64 * stats.assign_frac.iter().zip(&stats.mean_prob).map(|(f, p)| f * p).sum::<f64>())
}

/// Fraction of selections that went to each expert.
pub fn assignment_fractions(decisions: &[RoutingDecision], pool_size: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; pool_size];
    for d in decisions {
        for &i in &d.selected {
            counts[i] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no routed tokens in batch".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Indices that share in the mixing normalization for one token.
pub fn mixing_set(decision: &RoutingDecision, n_routed: usize, mode: NullMass) -> Vec<usize> {
    match mode {
        NullMass::Attenuate => decision.selected.clone(),
        NullMass::Exclude => decision.selected.iter().copied().filter(|&i| i < n_routed).collect(),
    }
}

fn locate_token(err: Error, context: &str, rows: Option<&[usize]>) -> Error {
    match err {
        Error::NonFinite(msg) => {
            let token = msg
                .rsplit_once("row ")
                .and_then(|(_, r)| r.parse::<usize>().ok())
                .map(|r| rows.map_or(r, |rs| rs[r]));
            match token {
                Some(t) => Error::NonFinite(format!("{context}, token {t}: {msg}")),
                None => Error::NonFinite(format!("{context}: {msg}")),
            }
        }
        other => other,
    }
}

/// Gate, select, evaluate and mix one MoE layer on the tape.
///
/// `x` is `n_tokens × d`. When `frozen` is given, those selections are reused
/// instead of re-running the router (mixing weights still follow the current
/// gate). Selection is never differentiated; gradients reach the gate through
/// the renormalized weights of selected experts and through the aux loss.
pub fn moe_forward(
    g: &mut Graph,
    config: &MoeConfig,
    vars: &PoolVars,
    x: Var,
    frozen: Option<&[RoutingDecision]>,
) -> Result<MoeForward> {
    let (n, d) = g.value(x).dims2()?;
    if n == 0 {
        return Err(Error::Empty("moe forward on zero tokens".into()));
    }
    let logits = g.matmul(x, vars.gate).map_err(|e| locate_token(e, "gate", None))?;
    let probs = g.softmax_rows(logits).map_err(|e| locate_token(e, "gate", None))?;

    let decisions: Vec<RoutingDecision> = match frozen {
        Some(fixed) => {
            if fixed.len() != n {
                return Err(shape_err!("{} frozen decisions for {n} tokens", fixed.len()));
            }
            let pv = g.value(probs);
            fixed
                .iter()
                .enumerate()
                .map(|(t, d)| {
                    let row = pv.row(t);
                    let mass = d.mass(row);
                    RoutingDecision {
                        selected: d.selected.clone(),
                        mix_weights: d.selected.iter().map(|&i| row[i] / mass).collect(),
                    }
                })
                .collect()
        }
        None => {
            let pv = g.value(probs);
            (0..n).map(|t| config.router.select(pv.row(t))).collect::<Result<_>>()?
        }
    };

    let keep: Vec<Vec<usize>> =
        decisions.iter().map(|dec| mixing_set(dec, config.n_routed, config.null_mass)).collect();
    let mut token_lists: Vec<Vec<usize>> = vec![Vec::new(); config.n_routed];
    for (t, ks) in keep.iter().enumerate() {
        for &i in ks {
            if i < config.n_routed {
                token_lists[i].push(t);
            }
        }
    }
    let weights = g.renormalize(probs, keep)?;

    let mut parts = Vec::new();
    for (i, rows) in token_lists.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let ctx = format!("routed expert {i}");
        let xi = g.gather_rows(x, &rows)?;
        let h = vars.routed[i].forward(g, xi).map_err(|e| locate_token(e, &ctx, Some(&rows)))?;
        let s = g.pick(weights, rows.iter().map(|&t| (t, i)).collect())?;
        let y = g.scale_rows(h, s).map_err(|e| locate_token(e, &ctx, Some(&rows)))?;
        parts.push((y, rows));
    }
    let mut terms = vec![g.scatter_rows(n, d, parts)?];
    for (s, shared) in vars.shared.iter().enumerate() {
        let ctx = format!("shared expert {s}");
        terms.push(shared.forward(g, x).map_err(|e| locate_token(e, &ctx, None))?);
    }
    let output = g.sum(&terms).map_err(|e| locate_token(e, "moe output", None))?;

    let pool = config.pool_size();
    let assign_frac = assignment_fractions(&decisions, pool)?;
    let pbar = g.mean_rows(probs)?;
    let mean_prob = g.value(pbar).data().to_vec();
    let coeffs = assign_frac.iter().map(|f| f * pool as f64).collect();
    let aux_loss = g.weighted_sum(pbar, coeffs)?;

    Ok(MoeForward { output, probs, decisions, aux_stats: AuxStats { assign_frac, mean_prob }, aux_loss })
}

impl ExpertPool {
    /// Evaluates the layer on `x` without recording gradients.
    pub fn forward(&self, x: &Tensor) -> Result<LayerOutput> {
        self.forward_with(x, None)
    }

    pub fn forward_with(&self, x: &Tensor, frozen: Option<&[RoutingDecision]>) -> Result<LayerOutput> {
        self.validate()?;
        let (_, d) = x.dims2()?;
        if d != self.d_model() {
            return Err(shape_err!("input width {d} for a {}-wide pool", self.d_model()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let fwd = moe_forward(&mut g, &self.config, &vars, xv, frozen)?;
        Ok(LayerOutput {
            output: g.value(fwd.output).clone(),
            gate: GateDistribution { probs: g.value(fwd.probs).clone() },
            decisions: fwd.decisions,
            aux_stats: fwd.aux_stats,
        })
    }

    /// Gate probabilities for `x`.
    pub fn gate(&self, x: &Tensor) -> Result<GateDistribution> {
        crate::moe::routing::gate(&self.gate, x)
    }
}
