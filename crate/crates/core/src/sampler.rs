//! DDIM sampling with classifier-free guidance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, LatentBatch};
use crate::diffusion::{NoisePredictor, NoiseSchedule, UNet};
use crate::error::{Error, IoContext, Result};
use crate::textcond::Conditioner;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub eta: f64,
    /// s in ε_u + s·(ε_c − ε_u); stored verbatim.
    pub guidance_scale: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            eta: 0.0,
            guidance_scale: 1.75,
            seed: 0,
            batch_size: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > schedule_steps {
            return Err(Error::Config(format!(
                "n_steps must lie in [1, {schedule_steps}], got {}",
                self.n_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("guidance_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Descending timesteps `T, T − k, …` with stride `k = ⌊T / n⌋`.
pub fn plan_timesteps(t_max: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_max {
        return Err(Error::InvalidArgument(format!(
            "cannot plan {n_steps} steps over T = {t_max}"
        )));
    }
    let stride = t_max / n_steps;
    Ok((0..n_steps).map(|i| t_max - i * stride).collect())
}

/// `ε_u + s·(ε_c − ε_u)`. s = 1 and s = 0 return the conditional and
/// unconditional predictions unchanged rather than evaluating the formula,
/// so those identities hold bit for bit.
pub fn combine_guidance(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(Error::Shape(format!(
            "conditional {:?} vs unconditional {:?}",
            eps_cond.dims(),
            eps_uncond.dims()
        )));
    }
    if s == 1.0 {
        Ok(eps_cond.clone())
    } else if s == 0.0 {
        Ok(eps_uncond.clone())
    } else {
        Ok((eps_uncond + ((eps_cond - eps_uncond)? * s)?)?)
    }
}

/// Guided prediction; both branches go through the model as one batch.
pub fn guided_eps(
    model: &dyn NoisePredictor,
    z_t: &Tensor,
    t: &[usize],
    context: &Tensor,
    null_context: &Tensor,
    s: f64,
) -> Result<Tensor> {
    if context.dims() != null_context.dims() {
        return Err(Error::Shape(format!(
            "context {:?} vs null context {:?}",
            context.dims(),
            null_context.dims()
        )));
    }
    let b = z_t.dim(0)?;
    let z2 = Tensor::cat(&[z_t, z_t], 0)?;
    let c2 = Tensor::cat(&[context, null_context], 0)?;
    let t2: Vec<usize> = t.iter().chain(t).copied().collect();
    let eps = model.predict_noise(&z2, &t2, &c2)?.detach();
    combine_guidance(&eps.narrow(0, 0, b)?, &eps.narrow(0, b, b)?, s)
}

/// One DDIM update from `t` to `t_prev` (ᾱ₀ = 1). `noise` is required
/// iff `eta > 0`, and is ignored otherwise.
pub fn ddim_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t <= t_prev || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "DDIM step needs T ≥ t > t_prev ≥ 0, got t = {t}, t_prev = {t_prev}"
        )));
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let x0 = ((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mean = ((x0 * ab_prev.sqrt())? + (eps * dir)?)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::InvalidArgument("eta > 0 needs a noise tensor".into()))?;
        Ok((mean + (noise * sigma)?)?)
    } else {
        Ok(mean)
    }
}

/// Runs a full guided DDIM trajectory from `z_t_max`. `noise_for(step)`
/// supplies the per-step noise when eta > 0.
pub fn sample_latents(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_t_max: &Tensor,
    context: &Tensor,
    null_context: &Tensor,
    config: &SamplerConfig,
    mut noise_for: impl FnMut(usize) -> Result<Tensor>,
) -> Result<Tensor> {
    config.validate(schedule.steps())?;
    let plan = plan_timesteps(schedule.steps(), config.n_steps)?;
    let b = z_t_max.dim(0)?;
    let mut z = z_t_max.clone();
    for (i, &t) in plan.iter().enumerate() {
        let t_prev = plan.get(i + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, &z, &vec![t; b], context, null_context, config.guidance_scale)?;
        let noise = if config.eta > 0.0 { Some(noise_for(i)?) } else { None };
        z = ddim_step(&z, &eps, t, t_prev, schedule, config.eta, noise.as_ref())?.detach();
    }
    Ok(z)
}

/// One generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub index: usize,
    pub caption: String,
    pub seed: u64,
    pub file: String,
    pub sampler: SamplerConfig,
    /// File name → SHA-256 of every checkpoint involved.
    pub checkpoints: BTreeMap<String, String>,
}

/// Everything needed to turn captions into images.
pub struct Generator<'a> {
    pub unet: &'a UNet,
    pub schedule: &'a NoiseSchedule,
    pub vae: &'a Autoencoder,
    pub conditioner: &'a Conditioner,
    pub checkpoint_hashes: BTreeMap<String, String>,
}

impl Generator<'_> {
    /// Fails if the three models do not fit together.
    pub fn check(&self) -> Result<()> {
        let u = self.unet.config();
        if u.context_len != self.conditioner.context_len() || u.context_dim != self.conditioner.d_embed() {
            return Err(Error::Shape(format!(
                "U-Net expects a ({}, {}) context, the text conditioner produces ({}, {})",
                u.context_len,
                u.context_dim,
                self.conditioner.context_len(),
                self.conditioner.d_embed()
            )));
        }
        if u.in_channels != self.vae.config().z_channels {
            return Err(Error::Shape(format!(
                "U-Net has {} latent channels, the autoencoder {}",
                u.in_channels,
                self.vae.config().z_channels
            )));
        }
        self.vae.require_scale()?;
        Ok(())
    }

    /// Seed of caption `index`; independent of batching and sharding.
    pub fn caption_seed(config: &SamplerConfig, index: usize) -> u64 {
        crate::rng::derive_seed(config.seed, "caption", index as u64)
    }

    /// Writes `{index:06}.png` per caption and `manifest.jsonl` into `out_dir`.
    pub fn generate(&self, captions: &[String], config: &SamplerConfig, out_dir: &Path) -> Result<Vec<GenerationRecord>> {
        self.check()?;
        config.validate(self.schedule.steps())?;
        std::fs::create_dir_all(out_dir).at(out_dir)?;
        let latent = self.vae.config().latent_size();
        let shape = [self.unet.config().in_channels, latent, latent];
        let null = self.conditioner.null()?.matrix;
        let scale_factor = self.vae.require_scale()?;
        let mut records = Vec::with_capacity(captions.len());
        for (batch_no, chunk) in captions.chunks(config.batch_size).enumerate() {
            let first = batch_no * config.batch_size;
            let seeds: Vec<u64> = (first..first + chunk.len()).map(|i| Self::caption_seed(config, i)).collect();
            let z_t = Tensor::stack(
                &seeds
                    .iter()
                    .map(|&s| crate::rng::normal_tensor(&mut crate::rng::stream(s, "z_T", 0), &shape))
                    .collect::<candle_core::Result<Vec<_>>>()?,
                0,
            )?;
            let ctx = Tensor::stack(
                &chunk.iter().map(|c| Ok(self.conditioner.encode(c)?.matrix)).collect::<Result<Vec<_>>>()?,
                0,
            )?;
            let nulls = Tensor::stack(&vec![null.clone(); chunk.len()], 0)?;
            let z0 = sample_latents(self.unet, self.schedule, &z_t, &ctx, &nulls, config, |step| {
                let parts = seeds
                    .iter()
                    .map(|&s| crate::rng::normal_tensor(&mut crate::rng::stream(s, "ddim", step as u64), &shape))
                    .collect::<candle_core::Result<Vec<_>>>()?;
                Ok(Tensor::stack(&parts, 0)?)
            })?;
            let images = self
                .vae
                .decode_latents(&LatentBatch {
                    tensor: z0,
                    scale_factor,
                })?
                .to_dtype(DType::F32)?
                .clamp(-1f32, 1f32)?;
            for (k, caption) in chunk.iter().enumerate() {
                let index = first + k;
                let file = format!("{index:06}.png");
                crate::imageio::save_rgb(&images.get(k)?, &out_dir.join(&file))?;
                records.push(GenerationRecord {
                    index,
                    caption: caption.clone(),
                    seed: seeds[k],
                    file,
                    sampler: config.clone(),
                    checkpoints: self.checkpoint_hashes.clone(),
                });
            }
            log::info!("generated {}/{} images", records.len(), captions.len());
        }
        write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
        Ok(records)
    }
}

pub fn write_manifest(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::checkpoint::write_atomic(path, &buf)
}

pub fn read_manifest(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Reads one caption per non-empty line.
pub fn read_captions(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).at(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Hashes of the given checkpoint files keyed by file name.
pub fn checkpoint_hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, crate::checkpoint::file_sha256(p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use candle_core::Device;

    fn tensor(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (v.len(),), &Device::Cpu).unwrap()
    }

    #[test]
    fn plans() {
        let p = plan_timesteps(1000, 50).unwrap();
        assert_eq!(p.len(), 50);
        assert_eq!((p[0], p[1], p[49]), (1000, 980, 20));
        assert_eq!(plan_timesteps(7, 7).unwrap(), vec![7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(plan_timesteps(1000, 1).unwrap(), vec![1000]);
        assert!(plan_timesteps(10, 11).is_err());
        assert!(plan_timesteps(10, 0).is_err());
    }

    #[test]
    fn guidance_formula_and_degeneracies() {
        let c = tensor(&[1.0, 0.3]);
        let u = tensor(&[0.0, 0.1]);
        assert_eq!(combine_guidance(&c, &u, 2.0).unwrap().to_vec1::<f64>().unwrap()[0], 2.0);
        assert_eq!(combine_guidance(&c, &u, 1.0).unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 0.3]);
        assert_eq!(combine_guidance(&c, &u, 0.0).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.1]);
        assert!(combine_guidance(&c, &tensor(&[0.0]), 1.5).is_err());
    }

    #[test]
    fn ddim_preserves_clean_signal() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = tensor(&[0.7, -1.2]);
        let z = (&x0 * s.alpha_bar(500).sqrt()).unwrap();
        let eps = z.zeros_like().unwrap();
        let prev = ddim_step(&z, &eps, 500, 480, &s, 0.0, None).unwrap().to_vec1::<f64>().unwrap();
        let k = s.alpha_bar(480).sqrt();
        assert!((prev[0] - 0.7 * k).abs() < 1e-14 && (prev[1] + 1.2 * k).abs() < 1e-14);
    }

    #[test]
    fn final_step_returns_x0_estimate() {
        let s = ScheduleConfig::default().build().unwrap();
        let z = tensor(&[0.4, 0.9]);
        let eps = tensor(&[0.2, -0.1]);
        let ab = s.alpha_bar(20);
        let out = ddim_step(&z, &eps, 20, 0, &s, 0.0, None).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(out[0], (0.4 - 0.2 * (1.0 - ab).sqrt()) / ab.sqrt());
        assert!(ddim_step(&z, &eps, 20, 20, &s, 0.0, None).is_err());
        assert!(ddim_step(&z, &eps, 20, 10, &s, 0.5, None).is_err());
        // σ vanishes on the final step, so no noise is needed there
        assert!(ddim_step(&z, &eps, 20, 0, &s, 0.5, None).is_ok());
    }
}
