//! Central finite-difference verification of tape gradients.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamSet, Rng, Var};

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn bind(g: &mut Graph, params: &ParamSet) -> IndexMap<String, Var> {
    params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect()
}

fn evaluate<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &IndexMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = bind(&mut g, params);
    let root = f(&mut g, &vars)?;
    let v = g.value(root).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences with step `h`
/// at each `(param, flat index)` in `coords`.
///
/// `f` builds a scalar on a fresh graph from bound parameters and must be
/// deterministic.
pub fn grad_check<F>(params: &ParamSet, coords: &[(String, usize)], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &IndexMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = bind(&mut g, params);
    let root = f(&mut g, &vars)?;
    if !g.value(root).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(root)?;

    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for (name, idx) in coords {
        let var = *vars.get(name).ok_or_else(|| Error::Param(format!("unknown parameter {name}")))?;
        let analytic = grads.get(var).map_or(0.0, |t| t.data()[*idx]);
        let orig = params[name].data()[*idx];
        work.get_mut(name).expect("bound").data_mut()[*idx] = orig + h;
        let up = evaluate(&work, &f)?;
        work.get_mut(name).expect("bound").data_mut()[*idx] = orig - h;
        let down = evaluate(&work, &f)?;
        work.get_mut(name).expect("bound").data_mut()[*idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        out.push(CoordCheck {
            param: name.clone(),
            index: *idx,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = out.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, coords: out })
}

/// Draws `per_param` random flat indices from every parameter accepted by `filter`.
pub fn sample_coords(
    params: &ParamSet,
    per_param: usize,
    rng: &mut Rng,
    filter: impl Fn(&str) -> bool,
) -> Vec<(String, usize)> {
    let mut coords = Vec::new();
    for (name, t) in params {
        if !filter(name) || t.is_empty() {
            continue;
        }
        for _ in 0..per_param {
            coords.push((name.clone(), rng.below(t.len())));
        }
    }
    coords
}
