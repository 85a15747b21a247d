//! Central finite-difference gradient checks.

use crate::diffcore::graph::{Graph, NodeId};
use crate::diffcore::params::ParameterStore;
use crate::error::{Result, StpsError};
use crate::tensor::Tensor;

/// Relative error used throughout: `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(g: &Graph<f64>, id: NodeId) -> Result<f64> {
    let v = g.value(id);
    if v.len() != 1 {
        return Err(StpsError::shape("grad_check", format!("output {:?} is not scalar", v.shape())));
    }
    Ok(v.data()[0])
}

/// Checks the gradient of a scalar function of one input tensor.
///
/// `f` builds the graph from the input leaf and returns the scalar output.
/// Returns the max relative error over coordinates.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.variable(p.clone());
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_store`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

/// Checks gradients of every parameter in `store` (or the subset in `only`)
/// for a scalar loss built by `f` on an evaluation-mode graph.
pub fn grad_check_store<F>(
    store: &ParameterStore<f64>,
    only: Option<&[&str]>,
    f: F,
    step: f64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let mut analytic = ParameterStore::new();
    for (name, entry) in store.iter() {
        analytic.insert(name, Tensor::zeros(entry.value.shape().to_vec()))?;
    }
    for (name, id) in g.bound_params() {
        if let Some(grad) = g.grad(id) {
            *analytic.value_mut(name).expect("same names") = grad.clone();
        }
    }

    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(&mut g, s)?;
        scalar_of(&g, y)
    };
    let mut probe = store.clone();
    let names: Vec<String> = match only {
        Some(list) => list.iter().map(|s| s.to_string()).collect(),
        None => store.names().map(str::to_string).collect(),
    };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let base = store
            .value(&name)
            .ok_or_else(|| StpsError::UnknownParameter(name.clone()))?
            .clone();
        let an = analytic.value(&name).expect("same names").clone();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let x0 = base.data()[i];
            probe.value_mut(&name).expect("present").data_mut()[i] = x0 + step;
            let up = eval(&probe)?;
            probe.value_mut(&name).expect("present").data_mut()[i] = x0 - step;
            let down = eval(&probe)?;
            probe.value_mut(&name).expect("present").data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(an.data()[i], numeric));
        }
        out.push(ParamCheck {
            name,
            max_rel_error: worst,
            max_abs_grad: an.data().iter().fold(0.0f64, |m, x| m.max(x.abs())),
        });
    }
    Ok(out)
}
