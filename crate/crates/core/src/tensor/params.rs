//! Named parameter store with per-parameter Adam moments.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{ensure_contract, Result};

/// Adam hyperparameters. Defaults are the training settings used throughout:
/// constant learning rate 1e-4, betas (0.9, 0.999), eps 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    grad: Option<Tensor>,
    m: Tensor,
    v: Tensor,
}

/// Ordered map from dotted name to parameter tensor, with gradient
/// accumulators and Adam state. Single-writer: gradient accumulation and
/// steps take `&mut self`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        ensure_contract!(
            !self.params.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
        Ok(())
    }

    fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| crate::error::Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.param(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.params.get_mut(name) {
            Some(p) => Ok(&mut p.value),
            None => Err(crate::error::Error::Contract(format!(
                "unknown parameter {name:?}"
            ))),
        }
    }

    /// Replaces a parameter's value, keeping moments. Shapes must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = match self.params.get_mut(name) {
            Some(p) => p,
            None => {
                return Err(crate::error::Error::Contract(format!(
                    "unknown parameter {name:?}"
                )))
            }
        };
        ensure_contract!(
            p.value.shape() == value.shape(),
            "parameter {name:?} has shape {:?}, replacement has {:?}",
            p.value.shape(),
            value.shape()
        );
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn grad(&self, name: &str) -> Result<Option<&Tensor>> {
        Ok(self.param(name)?.grad.as_ref())
    }

    /// Adds `grad` into the parameter's accumulator.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = match self.params.get_mut(name) {
            Some(p) => p,
            None => {
                return Err(crate::error::Error::Contract(format!(
                    "unknown parameter {name:?}"
                )))
            }
        };
        ensure_contract!(
            p.value.shape() == grad.shape(),
            "gradient for {name:?} has shape {:?}, parameter has {:?}",
            grad.shape(),
            p.value.shape()
        );
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One Adam update with bias correction, in place, over every parameter.
    /// Every parameter must carry a populated gradient; gradients are
    /// cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in &self.params {
            ensure_contract!(
                p.grad.is_some(),
                "adam_step requires a populated gradient for {name:?}"
            );
        }
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - cfg.beta1.powi(t);
        let corr2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            for i in 0..grad.len() {
                let g = grad.data()[i];
                let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let update = cfg.lr * (m / corr1) / ((v / corr2).sqrt() + cfg.eps);
                p.value.data_mut()[i] -= update;
            }
            p.value
                .ensure_finite(&format!("parameter {name:?} after adam_step"))?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}
