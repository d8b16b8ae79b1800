use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Compute {
    #[default]
    Full32,
    /// f16 activations with f32 master weights, f32 loss and f32 optimizer
    /// state. (There is no bf16 path on the CPU backend.)
    Mixed16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossScaling {
    #[default]
    None,
    Dynamic,
}

/// Which dtype the model computes in, and how the loss is scaled before
/// backpropagation. Nothing here depends on how many devices exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecisionPolicy {
    pub compute: Compute,
    pub loss_scaling: LossScaling,
    /// Initial dynamic loss scale.
    pub init_scale: f64,
    /// Good steps before the dynamic scale doubles.
    pub growth_interval: u64,
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self {
            compute: Compute::Full32,
            loss_scaling: LossScaling::None,
            init_scale: 1024.0,
            growth_interval: 200,
        }
    }
}

impl PrecisionPolicy {
    pub fn full32() -> Self {
        Self::default()
    }

    pub fn mixed16() -> Self {
        Self {
            compute: Compute::Mixed16,
            loss_scaling: LossScaling::Dynamic,
            ..Self::default()
        }
    }

    pub fn compute_dtype(&self) -> DType {
        match self.compute {
            Compute::Full32 => DType::F32,
            Compute::Mixed16 => DType::F16,
        }
    }

    /// Explicit cast into the compute region.
    pub fn enter(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.to_dtype(self.compute_dtype())?)
    }

    /// Explicit cast out of the compute region, to f32.
    pub fn leave(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.to_dtype(DType::F32)?)
    }
}

/// Dynamic loss scale: halve and skip the update on overflow, double after
/// `growth_interval` consecutive finite steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub good_steps: u64,
    pub skipped: u64,
}

impl LossScaler {
    pub fn new(policy: &PrecisionPolicy) -> Self {
        let scale = match policy.loss_scaling {
            LossScaling::None => 1.0,
            LossScaling::Dynamic => policy.init_scale,
        };
        Self {
            scale,
            good_steps: 0,
            skipped: 0,
        }
    }

    /// Records the outcome of one update; returns whether to apply it.
    pub fn update(&mut self, policy: &PrecisionPolicy, grads_finite: bool) -> bool {
        if policy.loss_scaling == LossScaling::None {
            return grads_finite;
        }
        if !grads_finite {
            self.scale = (self.scale / 2.0).max(1.0);
            self.good_steps = 0;
            self.skipped += 1;
            return false;
        }
        self.good_steps += 1;
        if self.good_steps >= policy.growth_interval {
            self.scale = (self.scale * 2.0).min(65536.0);
            self.good_steps = 0;
        }
        true
    }
}
