//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the routing or layer code it is used to check.

#![allow(dead_code)]

use dynmoe::moe::{ExpertPool, FfnParams, NullMass, THRESHOLD_SLACK};
use dynmoe::Tensor;

/// True when expert `a` outranks `b`: larger probability, then lower index.
fn outranks(probs: &[f64], a: usize, b: usize) -> bool {
    probs[a] > probs[b] || (probs[a] == probs[b] && a < b)
}

fn ordered(probs: &[f64], mut set: Vec<usize>) -> Vec<usize> {
    // insertion sort by rank keeps the oracle free of the library's sort
    for i in 1..set.len() {
        let mut j = i;
        while j > 0 && outranks(probs, set[j], set[j - 1]) {
            set.swap(j, j - 1);
            j -= 1;
        }
    }
    set
}

/// Among equal-size subsets, the one whose ranked members dominate
/// element-by-element.
fn better(probs: &[f64], a: &[usize], b: &[usize]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return outranks(probs, *x, *y);
        }
    }
    false
}

/// Exhaustive search for the smallest subset with mass ≥ p, over all 2^E subsets.
pub fn brute_force_top_p(probs: &[f64], p: f64) -> Vec<usize> {
    let e = probs.len();
    let mut best: Option<Vec<usize>> = None;
    for mask in 1u32..(1 << e) {
        let members: Vec<usize> = (0..e).filter(|i| mask & (1 << i) != 0).collect();
        let mass: f64 = members.iter().map(|&i| probs[i]).sum();
        if mass < p - THRESHOLD_SLACK {
            continue;
        }
        let cand = ordered(probs, members);
        best = match best {
            None => Some(cand),
            Some(b) if cand.len() < b.len() || (cand.len() == b.len() && better(probs, &cand, &b)) => Some(cand),
            keep => keep,
        };
    }
    best.unwrap_or_else(|| ordered(probs, (0..e).collect()))
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn naive_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// One token through an FFN with explicit loops.
pub fn naive_ffn(f: &FfnParams, x: &[f64]) -> Vec<f64> {
    let (d, h) = (f.w1.shape()[0], f.w1.shape()[1]);
    let hidden: Vec<f64> = (0..h)
        .map(|j| naive_gelu((0..d).map(|i| x[i] * f.w1.data()[i * h + j]).sum::<f64>() + f.b1.data()[j]))
        .collect();
    (0..d)
        .map(|k| (0..h).map(|j| hidden[j] * f.w2.data()[j * d + k]).sum::<f64>() + f.b2.data()[k])
        .collect()
}

/// Evaluates every expert on every token, then masks and mixes with weights
/// recomputed from the oracle gate. `selections[t]` is the selected index set.
pub fn dense_masked_oracle(pool: &ExpertPool, x: &Tensor, selections: &[Vec<usize>]) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let logits = naive_matmul(x, &pool.gate);
    let nr = pool.config.n_routed;
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let probs = naive_softmax(logits.row(t));
        let xt = x.row(t);
        let all: Vec<Vec<f64>> = pool.routed.iter().map(|f| naive_ffn(f, xt)).collect();
        let norm_set: Vec<usize> = match pool.config.null_mass {
            NullMass::Attenuate => selections[t].clone(),
            NullMass::Exclude => selections[t].iter().copied().filter(|&i| i < nr).collect(),
        };
        let denom: f64 = norm_set.iter().map(|&i| probs[i]).sum();
        for i in 0..nr {
            let mask = if norm_set.contains(&i) { 1.0 } else { 0.0 };
            let w = mask * probs[i] / if denom > 0.0 { denom } else { 1.0 };
            for k in 0..d {
                out[t * d + k] += w * all[i][k];
            }
        }
        for s in &pool.shared {
            let y = naive_ffn(s, xt);
            for k in 0..d {
                out[t * d + k] += y[k];
            }
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

/// Random probability row of length `e`. Every fourth row is quantized to
/// sixteenths so exact ties occur.
pub fn random_row(rng: &mut dynmoe::Rng, e: usize, case: usize) -> Vec<f64> {
    if case % 4 == 3 {
        let mut units = vec![0usize; e];
        for _ in 0..16 {
            units[rng.below(e)] += 1;
        }
        return units.into_iter().map(|u| u as f64 / 16.0).collect();
    }
    let temp = [0.3, 1.0, 3.0][case % 3];
    let logits: Vec<f64> = (0..e).map(|_| rng.normal() * temp).collect();
    naive_softmax(&logits)
}
