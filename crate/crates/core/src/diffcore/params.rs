//! Named trainable arrays and the AdamW optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::graph::Graph;
use crate::error::{Result, StpsError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One trainable array with its gradient slot and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: None,
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

/// Parameters keyed by unique name; iteration is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(StpsError::invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, ParamEntry::new(value));
        Ok(())
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry<T>) {
        self.entries.insert(name.into(), entry);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).and_then(|e| e.grad.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Adds the gradients of every parameter bound on `graph` into the store.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        for (name, id) in graph.bound_params() {
            let Some(g) = graph.grad(id) else { continue };
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| StpsError::UnknownParameter(name.to_string()))?;
            match entry.grad.as_mut() {
                Some(acc) => acc.add_assign(g),
                None => entry.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// Copies values (not optimizer state) from `other` for names present in both.
    pub fn copy_values_from(&mut self, other: &Self) {
        for (name, e) in &mut self.entries {
            if let Some(o) = other.entries.get(name) {
                e.value = o.value.clone();
            }
        }
    }
}

/// Uniform(−a, a) initialisation with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

impl AdamW {
    /// Decoupled-weight-decay Adam step over the named parameters, then
    /// clears every gradient in the store.
    ///
    /// Each named parameter must carry a gradient.
    pub fn step<'a, T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let names: Vec<&str> = names.into_iter().collect();
        for name in &names {
            let entry = store
                .entries
                .get(*name)
                .ok_or_else(|| StpsError::UnknownParameter(name.to_string()))?;
            if entry.grad.is_none() {
                return Err(StpsError::MissingGrad(name.to_string()));
            }
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for name in names {
            let e = store.entries.get_mut(name).expect("checked above");
            e.step_count += 1;
            let t = e.step_count as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let grad = e.grad.as_ref().expect("checked above");
            let m = e.adam_m.data_mut();
            let v = e.adam_v.data_mut();
            let theta = e.value.data_mut();
            for i in 0..theta.len() {
                let g = grad.data()[i].to_f64_lossy();
                let mi = b1 * m[i].to_f64_lossy() + (1.0 - b1) * g;
                let vi = b2 * v[i].to_f64_lossy() + (1.0 - b2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                let th = theta[i].to_f64_lossy();
                let next = th * (1.0 - self.lr * self.weight_decay) - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                theta[i] = T::of(next);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, value: f64, grad: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::scalar(value)).unwrap();
        s.entries.get_mut(name).unwrap().grad = Some(Tensor::scalar(grad));
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = store_with("w", 0.7, 0.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, ["w"]).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 0.7);
        assert_eq!(s.entry("w").unwrap().step_count, 1);
        assert!(s.grad("w").is_none());
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m̂ = 1, v̂ = 1 after bias correction, so θ' = 1 − lr·1/(1+eps) − lr·wd·1.
        let mut s = store_with("w", 1.0, 1.0);
        AdamW::default().step(&mut s, ["w"]).unwrap();
        let expected = (1.0 - 1e-3 * 1e-3) - 1e-3 / (1.0 + 1e-8);
        let got = s.value("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - 0.998999).abs() < 1e-6);
    }

    #[test]
    fn lr_zero_changes_nothing() {
        let mut s = store_with("w", 2.5, 3.0);
        let opt = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, ["w"]).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 2.5);
    }

    #[test]
    fn pure_decay_shrinks_multiplicatively() {
        let mut s = store_with("w", 4.0, 0.0);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.2,
            ..AdamW::default()
        };
        opt.step(&mut s, ["w"]).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 4.0 * (1.0 - 0.1 * 0.2));
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("layer.w", Tensor::scalar(1.0)).unwrap();
        let err = AdamW::default().step(&mut s, ["layer.w"]).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }

    #[test]
    fn parameters_update_independently_of_name_order() {
        let mut a = ParameterStore::<f64>::new();
        a.insert("x", Tensor::scalar(1.0)).unwrap();
        a.insert("y", Tensor::scalar(-2.0)).unwrap();
        a.entries.get_mut("x").unwrap().grad = Some(Tensor::scalar(0.3));
        a.entries.get_mut("y").unwrap().grad = Some(Tensor::scalar(-0.7));
        let mut b = a.clone();
        AdamW::default().step(&mut a, ["x", "y"]).unwrap();
        AdamW::default().step(&mut b, ["y", "x"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
        s.insert("0", Tensor::scalar(2.0)).unwrap();
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["0", "a"]);
    }
}
