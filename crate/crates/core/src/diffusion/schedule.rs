use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// β, α and ᾱ tables for t = 1..=T (stored at index t − 1). ᾱ₀ ≡ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("noise schedule needs T ≥ 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start} → {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {}]", self.steps())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε`, one timestep per batch element.
    pub fn q_sample(&self, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.dims() != eps.dims() {
            return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
        }
        let (a, b) = self.coefficients(z0, t, |s, t| (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt()))?;
        Ok((z0.broadcast_mul(&a)? + eps.to_dtype(z0.dtype())?.broadcast_mul(&b)?)?)
    }

    /// One forward kernel step `z_t = √α_t·z_{t−1} + √β_t·ε`.
    pub fn q_step(&self, z_prev: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        if t.contains(&0) {
            return Err(Error::InvalidArgument("q_step needs t ≥ 1".into()));
        }
        let (a, b) = self.coefficients(z_prev, t, |s, t| (s.alpha(t).sqrt(), s.beta(t).sqrt()))?;
        Ok((z_prev.broadcast_mul(&a)? + eps.to_dtype(z_prev.dtype())?.broadcast_mul(&b)?)?)
    }

    /// Per-sample coefficient pairs as `(B, 1, …, 1)` tensors.
    fn coefficients(&self, z: &Tensor, t: &[usize], f: impl Fn(&Self, usize) -> (f64, f64)) -> Result<(Tensor, Tensor)> {
        let b = z.dim(0)?;
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for a batch of {b}", t.len())));
        }
        for &ti in t {
            self.check(ti)?;
        }
        let mut shape = vec![b];
        shape.extend(std::iter::repeat_n(1, z.rank() - 1));
        let (ca, cb): (Vec<f64>, Vec<f64>) = t.iter().map(|&ti| f(self, ti)).unzip();
        let dev = z.device();
        Ok((
            Tensor::from_vec(ca, shape.as_slice(), dev)?.to_dtype(z.dtype())?,
            Tensor::from_vec(cb, shape.as_slice(), dev)?.to_dtype(z.dtype())?,
        ))
    }
}

/// Sinusoidal timestep features `(B, dim)`: cosines then sines.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        out.extend(args.iter().map(|a| a.cos()));
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
