//! Helpers shared by the diffusion, sampler and acceptance tests: a
//! closed-form ε predictor for Gaussian data, a plain-f64 ancestral DDPM
//! sampler, and a central-difference gradient checker.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use histogen::diffusion::{NoisePredictor, NoiseSchedule};
use histogen::nn::ParamStore;
use rand::Rng;

/// ᾱ_t recomputed from β by a running product, t = 0..=T.
pub fn alpha_bars(betas: &[f64]) -> Vec<f64> {
    let mut out = vec![1.0];
    for b in betas {
        out.push(out.last().unwrap() * (1.0 - b));
    }
    out
}

pub fn betas_of(schedule: &NoiseSchedule) -> Vec<f64> {
    (1..=schedule.steps()).map(|t| schedule.beta(t)).collect()
}

/// The Bayes-optimal ε predictor when every latent coordinate is
/// independently N(m, s²): E[ε | z_t] = √(1−ᾱ)(z − √ᾱ·m) / (ᾱs² + 1 − ᾱ).
/// Affine in z_t, context ignored.
pub struct GaussianEps {
    pub m: f64,
    pub s2: f64,
    pub abar: Vec<f64>,
}

impl GaussianEps {
    pub fn new(m: f64, s2: f64, schedule: &NoiseSchedule) -> Self {
        Self { m, s2, abar: alpha_bars(&betas_of(schedule)) }
    }

    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.abar[t];
        let denom = ab * self.s2 + 1.0 - ab;
        let a = (1.0 - ab).sqrt() / denom;
        (a, -a * ab.sqrt() * self.m)
    }

    pub fn eps(&self, z: f64, t: usize) -> f64 {
        let (a, b) = self.coefficients(t);
        a * z + b
    }
}

impl NoisePredictor for GaussianEps {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], _context: &Tensor) -> histogen::Result<Tensor> {
        let b = z_t.dim(0)?;
        let per = z_t.elem_count() / b;
        let flat = z_t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let out: Vec<f64> = flat.iter().enumerate().map(|(i, &z)| self.eps(z, t[i / per])).collect();
        Ok(Tensor::from_vec(out, z_t.dims(), z_t.device())?.to_dtype(z_t.dtype())?)
    }
}

/// Ancestral DDPM: z_{t−1} = (z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β̃_t·ξ with
/// β̃_t = β_t(1−ᾱ_{t−1})/(1−ᾱ_t). `xi(t)` supplies ξ (zeros give the
/// posterior-mean trajectory). Returns every iterate z_T … z_0.
pub fn ddpm_ancestral(
    betas: &[f64],
    z_start: f64,
    eps: impl Fn(f64, usize) -> f64,
    mut xi: impl FnMut(usize) -> f64,
) -> Vec<f64> {
    let ab = alpha_bars(betas);
    let mut z = z_start;
    let mut path = vec![z];
    for t in (1..=betas.len()).rev() {
        let beta = betas[t - 1];
        let e = eps(z, t);
        let mean = (z - beta / (1.0 - ab[t]).sqrt() * e) / (1.0 - beta).sqrt();
        let var = beta * (1.0 - ab[t - 1]) / (1.0 - ab[t]);
        z = mean + var.sqrt() * xi(t);
        path.push(z);
    }
    path
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

/// Adds `scale`·N(0, 1) to every parameter, so zero-initialized output
/// layers stop masking upstream gradients.
pub fn perturb(params: &ParamStore, seed: u64, scale: f64) {
    let mut rng = histogen::rng::stream(seed, "perturb", 0);
    for (_, v) in params.iter() {
        let n = v.elem_count();
        let noise: Vec<f64> = (0..n).map(|_| normal(&mut rng) * scale).collect();
        let noise = Tensor::from_vec(noise, v.dims(), &Device::Cpu).unwrap().to_dtype(v.dtype()).unwrap();
        v.set(&(v.as_tensor() + noise).unwrap()).unwrap();
    }
}

fn read(params: &ParamStore, name: &str, i: usize) -> f64 {
    let v = params.get(name).unwrap();
    v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[i]
}

fn write(params: &ParamStore, name: &str, i: usize, value: f64) {
    let v = params.get(name).unwrap();
    let mut flat = v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    flat[i] = value;
    let t = Tensor::from_vec(flat, v.dims(), &Device::Cpu).unwrap().to_dtype(v.dtype()).unwrap();
    v.set(&t).unwrap();
}

#[derive(Debug, Clone)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// |a − n| / max(|a|, |n|), with a tiny floor for exact zeros.
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-12)
    }
}

/// Compares `analytic` (name → flattened gradient) against central
/// differences `(L(θ+h) − L(θ−h)) / 2h` at `count` random scalar entries.
/// Entries whose analytic gradient is below `floor` are redrawn, since a
/// relative comparison there only measures round-off.
pub fn central_differences(
    params: &ParamStore,
    analytic: &std::collections::BTreeMap<String, Vec<f64>>,
    loss: impl Fn() -> f64,
    count: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Vec<GradSample> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut rng = histogen::rng::stream(seed, "gradcheck", 0);
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        assert!(attempts < 100 * count, "too few parameters with gradient above {floor}");
        let name = &names[rng.random_range(0..names.len())];
        let g = &analytic[name];
        let index = rng.random_range(0..g.len());
        if g[index].abs() < floor {
            continue;
        }
        let x = read(params, name, index);
        write(params, name, index, x + h);
        let up = loss();
        write(params, name, index, x - h);
        let down = loss();
        write(params, name, index, x);
        out.push(GradSample {
            name: name.clone(),
            index,
            analytic: g[index],
            numeric: (up - down) / (2.0 * h),
        });
    }
    out
}
