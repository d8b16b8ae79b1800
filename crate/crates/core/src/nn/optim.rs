use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name, in the parameters' master dtype.
#[derive(Debug, Clone, Default)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    /// Collects the gradient of every parameter; parameters the loss does not
    /// reach get explicit zeros so accumulation stays shape-complete.
    pub fn collect(params: &ParamStore, store: &GradStore) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (name, var) in params.iter() {
            let g = match store.get(var) {
                Some(g) => g.to_dtype(params.dtype())?,
                None => var.as_tensor().zeros_like()?,
            };
            out.insert(name.clone(), g);
        }
        Ok(Self(out))
    }

    pub fn add(&mut self, other: &Gradients) -> Result<()> {
        if self.0.is_empty() {
            self.0 = other.0.clone();
            return Ok(());
        }
        for (name, g) in self.0.iter_mut() {
            let o = other
                .0
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient {name} missing")))?;
            *g = (&*g + o)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) -> Result<()> {
        for g in self.0.values_mut() {
            *g = (&*g * factor)?;
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> Result<f64> {
        let mut total = 0.0;
        for g in self.0.values() {
            total += g
                .to_dtype(candle_core::DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
        Ok(total)
    }

    pub fn all_finite(&self) -> Result<bool> {
        Ok(self.sum_squares()?.is_finite())
    }

    /// Flattens all gradients, in name order, into one vector.
    pub fn flatten(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for g in self.0.values() {
            out.extend(
                g.to_dtype(candle_core::DType::F64)?
                    .flatten_all()?
                    .to_vec1::<f64>()?,
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. State is exposed so checkpoints can
/// resume with an identical trajectory.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &ParamStore, grads: &Gradients) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let g = grads
                .0
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient {name} missing")))?;
            let m_prev = match self.first.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.second.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((v_prev * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let p = var.as_tensor();
            let decayed = if c.weight_decay > 0.0 {
                (p * (1.0 - c.lr * c.weight_decay))?
            } else {
                p.clone()
            };
            var.set(&(decayed - (update * c.lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors under `adam.m.*` / `adam.v.*` plus the step count.
    pub fn state_tensors(&self) -> (BTreeMap<String, Tensor>, u64) {
        let mut out = BTreeMap::new();
        for (k, v) in &self.first {
            out.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("adam.v.{k}"), v.clone());
        }
        (out, self.step)
    }

    pub fn load_state(
        &mut self,
        tensors: &BTreeMap<String, Tensor>,
        step: u64,
        params: &ParamStore,
    ) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        if step == 0 {
            return Ok(());
        }
        for (name, _) in params.iter() {
            let get = |prefix: &str| {
                tensors
                    .get(&format!("{prefix}{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {name} missing")))
            };
            self.first.insert(name.clone(), get("adam.m.")?);
            self.second.insert(name.clone(), get("adam.v.")?);
        }
        Ok(())
    }
}
