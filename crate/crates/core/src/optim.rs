//! Named trainable parameters with Adam state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// First moment estimate.
    pub m: Tensor,
    /// Second moment estimate.
    pub v: Tensor,
    /// Number of optimizer steps applied to this parameter.
    pub t: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let z = Tensor::zeros(value.shape());
        Param {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update of one parameter.
    pub fn update(&self, p: &mut Param) {
        p.t += 1;
        let t = p.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (value, grad, m, v) = (p.value.data_mut(), p.grad.data(), p.m.data_mut(), p.v.data_mut());
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// The trainable parameter set, keyed by name in sorted order.
///
/// Also holds the persistent power-iteration vectors of spectrally
/// normalized weights, keyed by the weight's name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    sn_vectors: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub fn insert_param(&mut self, name: &str, param: Param) {
        self.params.insert(name.to_string(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Records the named parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let value = self.value(name)?.clone();
        Ok(g.param(name, value))
    }

    /// Adds the gradients of every parameter bound in `g` to the stored ones.
    pub fn absorb_grads(&mut self, g: &Graph) -> Result<()> {
        for (name, var) in g.params() {
            let grad = g.grad(*var);
            self.get_mut(name)?.grad.add_assign(&grad);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// One Adam step over every parameter accepted by `select`, then clears
    /// all gradients.
    pub fn adam_step(&mut self, adam: &Adam, select: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            if select(name) {
                adam.update(p);
            }
        }
        self.zero_grads();
    }

    pub fn sn_vector(&self, name: &str) -> Option<&Vec<f64>> {
        self.sn_vectors.get(name)
    }

    pub fn sn_vector_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.sn_vectors.get_mut(name)
    }

    pub fn set_sn_vector(&mut self, name: &str, u: Vec<f64>) {
        self.sn_vectors.insert(name.to_string(), u);
    }

    pub fn sn_vectors(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.sn_vectors.iter()
    }
}
