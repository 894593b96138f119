//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn scalar_of(g: &Graph<'_>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract("checked function must return a scalar".into()));
    }
    Ok(t.data()[0])
}

/// Compares the tape gradient of `f` at `x` against central differences and
/// returns the worst relative error over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    check_step(h)?;
    let analytic = {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = f(&mut g, xv)?;
        let grads = g.backward(out)?;
        grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(x.shape(), data)?);
        let out = f(&mut g, xv)?;
        scalar_of(&g, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Finite-difference check of every coordinate of every trainable parameter.
pub fn param_finite_diff_check<F>(store: &ParamStore, f: F, h: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var>,
{
    check_step(h)?;
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        g.backward(out)?.param_grads()
    };
    let mut scratch = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).tensor.numel();
        for i in 0..n {
            let orig = store.get(id).tensor.data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                scratch.get_mut(id).tensor.data_mut()[i] = v;
                let mut g = Graph::with_params(&scratch);
                let out = f(&mut g)?;
                scalar_of(&g, out)
            };
            let numeric = (eval_at(orig + h)? - eval_at(orig - h)?) / (2.0 * h);
            scratch.get_mut(id).tensor.data_mut()[i] = orig;
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let e = rel_err(a, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
