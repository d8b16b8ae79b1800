//! Single-device LDM training with gradient accumulation, an explicit
//! precision policy and bitwise-resumable checkpoints.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::precision::{LossScaler, PrecisionPolicy};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::unet::{UNet, UNetConfig};
use crate::autoencoder::batch_indices;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{MetricsLog, StepMetrics};
use crate::nn::{stats_dtype, AdamConfig, AdamW, Gradients};
use crate::textcond::Conditioner;

pub const CHECKPOINT_FORMAT: &str = "histogen-ldm";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Anything that predicts ε from (z_t, t, context).
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], context: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], context: &Tensor) -> Result<Tensor> {
        self.forward(z_t, t, context)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Devices {
    #[default]
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdmTrainConfig {
    /// Micro-batch size.
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_iterations: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub condition_dropout_prob: f64,
    pub devices: Devices,
    pub seed: u64,
    pub precision: PrecisionPolicy,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            grad_accum_steps: 1,
            max_iterations: 5000,
            lr: 1e-4,
            weight_decay: 0.0,
            condition_dropout_prob: 0.1,
            devices: Devices::Single,
            seed: 0,
            precision: PrecisionPolicy::default(),
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

impl LdmTrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices == Devices::Multi {
            return Err(Error::Config(
                "devices: multi requested, but this build trains on a single device only; \
                 set devices: single (there is no automatic fallback)"
                    .into(),
            ));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout_prob) {
            return Err(Error::Config("condition_dropout_prob must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Scaled latents with a caption per sample. Contexts are stored once per
/// distinct caption, with the null (empty-caption) context last.
#[derive(Debug, Clone)]
pub struct LdmData {
    pub latents: Tensor,
    contexts: Tensor,
    caption_of: Vec<u32>,
}

impl LdmData {
    pub fn new(latents: Tensor, captions: &[String], conditioner: &Conditioner) -> Result<Self> {
        let mut unique: Vec<&str> = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        let caption_of = captions
            .iter()
            .map(|c| {
                *lookup.entry(c.as_str()).or_insert_with(|| {
                    unique.push(c);
                    unique.len() as u32 - 1
                })
            })
            .collect();
        let contexts = unique
            .iter()
            .map(|c| Ok(conditioner.encode(c)?.matrix))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(latents, contexts, caption_of, conditioner.null()?.matrix)
    }

    /// `contexts[caption_of[i]]` is sample i's (L, D) context.
    pub fn from_parts(latents: Tensor, contexts: Vec<Tensor>, caption_of: Vec<u32>, null: Tensor) -> Result<Self> {
        let n = latents.dim(0)?;
        if caption_of.len() != n {
            return Err(Error::Shape(format!("{} captions for {n} latents", caption_of.len())));
        }
        if let Some(bad) = caption_of.iter().find(|&&i| i as usize >= contexts.len()) {
            return Err(Error::InvalidArgument(format!("caption index {bad} out of range")));
        }
        let mut all = contexts;
        all.push(null);
        let contexts = Tensor::stack(&all, 0)?.to_dtype(DType::F32)?;
        Ok(Self {
            latents: latents.to_dtype(DType::F32)?,
            contexts,
            caption_of,
        })
    }

    pub fn len(&self) -> usize {
        self.caption_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caption_of.is_empty()
    }

    /// (L, D) of every context.
    pub fn context_shape(&self) -> (usize, usize) {
        let d = self.contexts.dims();
        (d[1], d[2])
    }

    fn null_row(&self) -> u32 {
        self.contexts.dim(0).expect("rank-3 contexts") as u32 - 1
    }
}

/// Per-sample randomness for one optimizer step. Each draw is keyed by
/// (seed, step, position in the effective batch), so splitting the batch
/// into micro-batches never changes what is drawn.
#[derive(Debug, Clone)]
struct Draw {
    index: u32,
    t: usize,
    dropped: bool,
    eps: Tensor,
}

fn draws(cfg: &LdmTrainConfig, schedule: &NoiseSchedule, data: &LdmData, step: u64) -> Result<Vec<Draw>> {
    let idx = batch_indices(cfg.seed, "ldm-batch", step as usize, data.len(), cfg.effective_batch());
    let shape = data.latents.dims()[1..].to_vec();
    let step_seed = crate::rng::derive_seed(cfg.seed, "ldm-draw", step);
    idx.into_iter()
        .enumerate()
        .map(|(j, index)| {
            let mut rng = crate::rng::stream(step_seed, "sample", j as u64);
            let t = rng.random_range(1..=schedule.steps());
            let dropped = rng.random::<f64>() < cfg.condition_dropout_prob;
            let eps = crate::rng::normal_tensor(&mut rng, &shape)?;
            Ok(Draw { index, t, dropped, eps })
        })
        .collect()
}

/// Mean squared error between ε and the model's prediction from
/// `q_sample(z0, t, ε)`, computed in `dtype` and reduced in at least f32.
pub fn noise_loss_in(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    context: &Tensor,
    dtype: DType,
) -> Result<Tensor> {
    let z_t = schedule.q_sample(z0, t, eps)?;
    let pred = model.predict_noise(&z_t.to_dtype(dtype)?, t, &context.to_dtype(dtype)?)?;
    let sd = stats_dtype(dtype);
    Ok((eps.to_dtype(sd)? - pred.to_dtype(sd)?)?.sqr()?.mean_all()?)
}

/// [`noise_loss_in`] under a precision policy: inputs are cast into the
/// compute dtype, the prediction back to f32.
pub fn noise_loss(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    context: &Tensor,
    policy: &PrecisionPolicy,
) -> Result<Tensor> {
    let z_t = schedule.q_sample(&z0.to_dtype(DType::F32)?, t, eps)?;
    let pred = model.predict_noise(&policy.enter(&z_t)?, t, &policy.enter(context)?)?;
    Ok((eps.to_dtype(DType::F32)? - policy.leave(&pred)?)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// False when a loss-scale overflow skipped the update.
    pub applied: bool,
    pub loss_scale: f64,
}

pub struct LdmTrainer {
    unet: UNet,
    schedule: NoiseSchedule,
    schedule_config: ScheduleConfig,
    config: LdmTrainConfig,
    opt: AdamW,
    scaler: LossScaler,
    step: u64,
}

impl LdmTrainer {
    pub fn new(unet: UNet, schedule_config: ScheduleConfig, config: LdmTrainConfig) -> Result<Self> {
        config.validate()?;
        if unet.params().dtype() != DType::F32 {
            return Err(Error::Config("U-Net master weights must be f32".into()));
        }
        let opt = AdamW::new(AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        });
        Ok(Self {
            unet,
            schedule: schedule_config.build()?,
            schedule_config,
            scaler: LossScaler::new(&config.precision),
            config,
            opt,
            step: 0,
        })
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &LdmTrainConfig {
        &self.config
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn loss_scale(&self) -> f64 {
        self.scaler.scale
    }

    fn check_data(&self, data: &LdmData) -> Result<()> {
        let c: &UNetConfig = self.unet.config();
        if data.context_shape() != (c.context_len, c.context_dim) {
            return Err(Error::Shape(format!(
                "text contexts are {:?}, the U-Net expects ({}, {})",
                data.context_shape(),
                c.context_len,
                c.context_dim
            )));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training latents".into()));
        }
        Ok(())
    }

    /// Gradient of the effective-batch mean loss at `step`, accumulated over
    /// micro-batches and unscaled. Also returns the loss.
    pub fn gradients(&self, data: &LdmData, step: u64) -> Result<(Gradients, f64)> {
        self.check_data(data)?;
        let draws = draws(&self.config, &self.schedule, data, step)?;
        let total = draws.len() as f64;
        let policy = &self.config.precision;
        let scale = self.scaler.scale;
        let dev = data.latents.device();
        let mut grads = Gradients::default();
        let mut loss_sum = 0.0;
        for (m, chunk) in draws.chunks(self.config.batch_size).enumerate() {
            let idx: Vec<u32> = chunk.iter().map(|d| d.index).collect();
            let rows: Vec<u32> = chunk
                .iter()
                .map(|d| if d.dropped { data.null_row() } else { data.caption_of[d.index as usize] })
                .collect();
            let z0 = data.latents.index_select(&Tensor::new(idx, dev)?, 0)?;
            let ctx = data.contexts.index_select(&Tensor::new(rows, dev)?, 0)?;
            let t: Vec<usize> = chunk.iter().map(|d| d.t).collect();
            let eps = Tensor::stack(&chunk.iter().map(|d| d.eps.clone()).collect::<Vec<_>>(), 0)?;
            let loss = noise_loss(&self.unet, &self.schedule, &z0, &t, &eps, &ctx, policy)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                let ts: Vec<_> = t.iter().take(8).collect();
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    loss: value,
                    diagnostics: format!(
                        "micro-batch {m} of {}, timesteps {ts:?}…, compute {:?}, loss scale {scale}",
                        self.config.grad_accum_steps, policy.compute
                    ),
                });
            }
            let weight = chunk.len() as f64 / total;
            loss_sum += value * weight;
            let g = Gradients::collect(self.unet.params(), &(loss * (weight * scale))?.backward()?)?;
            grads.add(&g)?;
        }
        grads.scale(1.0 / scale)?;
        Ok((grads, loss_sum))
    }

    /// One optimizer update.
    pub fn train_step(&mut self, data: &LdmData) -> Result<StepReport> {
        let (grads, loss) = self.gradients(data, self.step)?;
        let finite = grads.all_finite()?;
        let policy = self.config.precision;
        let scale = self.scaler.scale;
        let applied = self.scaler.update(&policy, finite);
        if applied {
            self.opt.step(self.unet.params(), &grads)?;
        } else if policy.loss_scaling == super::precision::LossScaling::None {
            return Err(Error::NonFiniteLoss {
                step: self.step as usize,
                loss,
                diagnostics: "loss finite but gradients overflowed".into(),
            });
        } else {
            log::warn!("step {}: gradient overflow at loss scale {scale}, update skipped", self.step);
        }
        let report = StepReport {
            step: self.step,
            loss,
            applied,
            loss_scale: scale,
        };
        self.step += 1;
        Ok(report)
    }

    /// Trains until `max_iterations` completed steps, logging every step and
    /// checkpointing to `checkpoint_dir/ldm-{step}.safetensors` plus
    /// `ldm-last.safetensors`.
    pub fn train(
        &mut self,
        data: &LdmData,
        mut metrics: Option<&mut MetricsLog>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        let mixed = self.config.precision.loss_scaling != super::precision::LossScaling::None;
        while self.step < self.config.max_iterations {
            let t0 = Instant::now();
            crate::memory::reset_peak();
            let r = self.train_step(data)?;
            if let Some(m) = metrics.as_deref_mut() {
                m.write(&StepMetrics {
                    step: r.step,
                    loss: r.loss,
                    lr: self.config.lr,
                    peak_mem_bytes: crate::memory::peak_bytes().unwrap_or(0),
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    loss_scale: mixed.then_some(r.loss_scale),
                })?;
            }
            if self.config.log_every > 0 && r.step % self.config.log_every == 0 {
                log::info!("ldm step {}: loss {:.5}", r.step, r.loss);
            }
            reports.push(r);
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if (every > 0 && self.step % every == 0) || self.step == self.config.max_iterations {
                    self.save(&dir.join(format!("ldm-{:07}.safetensors", self.step)))?;
                    self.save(&dir.join("ldm-last.safetensors"))?;
                }
            }
        }
        if let Some(m) = metrics {
            m.flush()?;
        }
        Ok(reports)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (adam, adam_step) = self.opt.state_tensors();
        let mut ck = Checkpoint::new(CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
            .with_tensors("unet.", self.unet.params().tensors())
            .with_tensors("opt.", adam);
        ck.set_json("unet_config", self.unet.config())?;
        ck.set_json("schedule", &self.schedule_config)?;
        ck.set_json("train_config", &self.config)?;
        ck.set_json("step", &self.step)?;
        ck.set_json("adam_step", &adam_step)?;
        ck.set_json("loss_scaler", &self.scaler)?;
        ck.save(path)
    }

    /// Restores a trainer exactly; `config` overrides the stored training
    /// config (e.g. a larger `max_iterations`) when given.
    pub fn load(path: &Path, config: Option<LdmTrainConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
        let unet = UNet::new(ck.json("unet_config")?, DType::F32)?;
        unet.params().load(&ck.tensors, "unet.")?;
        let config = match config {
            Some(c) => c,
            None => ck.json("train_config")?,
        };
        let mut trainer = Self::new(unet, ck.json("schedule")?, config)?;
        trainer.step = ck.json("step")?;
        trainer.scaler = ck.json("loss_scaler")?;
        trainer
            .opt
            .load_state(&ck.section("opt."), ck.json("adam_step")?, trainer.unet.params())?;
        Ok(trainer)
    }
}

/// Loads the U-Net and noise schedule from a training checkpoint.
pub fn load_model(path: &Path) -> Result<(UNet, NoiseSchedule)> {
    let ck = Checkpoint::load(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    let unet = UNet::new(ck.json("unet_config")?, DType::F32)?;
    unet.params().load(&ck.tensors, "unet.")?;
    let schedule: ScheduleConfig = ck.json("schedule")?;
    Ok((unet, schedule.build()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    struct Fixed(Option<Tensor>);

    impl NoisePredictor for Fixed {
        fn predict_noise(&self, z_t: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
            Ok(match &self.0 {
                Some(e) => e.to_dtype(z_t.dtype())?,
                None => z_t.zeros_like()?,
            })
        }
    }

    fn eps(n: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, "test-eps", 0);
        crate::rng::normal_tensor(&mut rng, &[n, 4, 8, 8]).unwrap()
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = ScheduleConfig::default().build().unwrap();
        let e = eps(4, 0);
        let z0 = eps(4, 1);
        let ctx = Tensor::zeros((4, 77, 8), DType::F32, &Device::Cpu).unwrap();
        let loss = noise_loss(&Fixed(Some(e.clone())), &s, &z0, &[1, 10, 100, 1000], &e, &ctx, &PrecisionPolicy::full32())
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_dimension_normalized_one() {
        // E‖ε‖²/N = 1 for unit Gaussian ε
        let s = ScheduleConfig::default().build().unwrap();
        let e = eps(64, 2);
        let ctx = Tensor::zeros((64, 77, 8), DType::F32, &Device::Cpu).unwrap();
        let t = vec![500; 64];
        let loss = noise_loss(&Fixed(None), &s, &e, &t, &e, &ctx, &PrecisionPolicy::full32())
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        // 4096 draws: std of the mean square ≈ √(2/4096) ≈ 0.022
        assert!((loss - 1.0).abs() < 0.1, "{loss}");
    }

    #[test]
    fn multi_device_is_a_config_error() {
        let cfg = LdmTrainConfig {
            devices: Devices::Multi,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn draws_do_not_depend_on_micro_batching() {
        let s = ScheduleConfig::default().build().unwrap();
        let data = LdmData::from_parts(
            eps(40, 3),
            vec![Tensor::ones((77, 8), DType::F32, &Device::Cpu).unwrap()],
            vec![0; 40],
            Tensor::zeros((77, 8), DType::F32, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let a = LdmTrainConfig {
            batch_size: 32,
            ..Default::default()
        };
        let b = LdmTrainConfig {
            batch_size: 8,
            grad_accum_steps: 4,
            ..Default::default()
        };
        let (da, db) = (draws(&a, &s, &data, 7).unwrap(), draws(&b, &s, &data, 7).unwrap());
        assert_eq!(da.len(), 32);
        for (x, y) in da.iter().zip(&db) {
            assert_eq!((x.index, x.t, x.dropped), (y.index, y.t, y.dropped));
        }
        let dropped = draws(&a, &s, &data, 8).unwrap().iter().filter(|d| d.dropped).count();
        assert!(dropped < 16);
    }

    #[test]
    fn context_shape_mismatch_is_rejected() {
        let unet = UNet::new(
            UNetConfig {
                base_width: 16,
                context_dim: 8,
                time_embed_dim: 32,
                heads: 2,
                ..Default::default()
            },
            DType::F32,
        )
        .unwrap();
        let trainer = LdmTrainer::new(unet, ScheduleConfig::default(), LdmTrainConfig::default()).unwrap();
        let ctx = Tensor::zeros((154, 8), DType::F32, &Device::Cpu).unwrap();
        let data = LdmData::from_parts(eps(4, 0), vec![ctx.clone()], vec![0; 4], ctx).unwrap();
        assert!(matches!(trainer.gradients(&data, 0), Err(Error::Shape(_))));
    }
}
