//! Small KL-regularized convolutional autoencoder: the latent space the
//! diffusion model runs in.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{MetricsLog, StepMetrics};
use crate::nn::{silu, upsample2x, AdamConfig, AdamW, Conv2d, GroupNorm, Gradients, Init, ParamStore, ResBlock, NORM_GROUPS};

pub const CHECKPOINT_FORMAT: &str = "histogen-vae";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    /// Spatial downsampling factor, a power of two.
    pub f: usize,
    pub z_channels: usize,
    pub base_width: usize,
    pub kl_weight: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            f: 4,
            z_channels: 4,
            base_width: 16,
            kl_weight: 1e-4,
            image_size: 32,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f < 2 || !self.f.is_power_of_two() {
            return Err(Error::Config(format!("autoencoder f must be a power of two ≥ 2, got {}", self.f)));
        }
        if self.z_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl_weight must be ≥ 0, got {}", self.kl_weight)));
        }
        if self.image_size == 0 || self.image_size % self.f != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by f = {}",
                self.image_size, self.f
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.f.trailing_zeros() as usize
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.f
    }

    /// Width after `level` downsamplings: base, 2·base, 2·base, …
    fn width(&self, level: usize) -> usize {
        self.base_width * if level == 0 { 1 } else { 2 }
    }
}

/// Diagonal Gaussian over latents, log-variance clamped to a finite range.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

impl GaussianPosterior {
    pub fn new(mean: Tensor, log_variance: Tensor) -> Result<Self> {
        if mean.dims() != log_variance.dims() {
            return Err(Error::Shape(format!(
                "posterior mean {:?} vs log-variance {:?}",
                mean.dims(),
                log_variance.dims()
            )));
        }
        let log_variance = log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(Self { mean, log_variance })
    }

    /// KL divergence to N(0, I), averaged over latent elements.
    pub fn kl(&self) -> Result<Tensor> {
        let lv = &self.log_variance;
        let per = ((self.mean.sqr()? + lv.exp()?)? - lv)?;
        Ok(((per - 1.0)? * 0.5)?.mean_all()?)
    }
}

/// Reparameterized draw `z = μ + exp(½·logσ²)·ε`.
pub fn sample_posterior(p: &GaussianPosterior, noise: &Tensor) -> Result<Tensor> {
    if noise.dims() != p.mean.dims() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match posterior {:?}",
            noise.dims(),
            p.mean.dims()
        )));
    }
    let std = (&p.log_variance * 0.5)?.exp()?;
    Ok((&p.mean + std.mul(&noise.to_dtype(p.mean.dtype())?)?)?)
}

/// Latents scaled to roughly unit standard deviation.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub tensor: Tensor,
    pub scale_factor: f64,
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv2d,
    mid: ResBlock,
    levels: Vec<(ResBlock, Conv2d)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    scale_factor: Option<f64>,
}

impl Autoencoder {
    /// Fresh weights from `config.seed`, stored in `dtype`.
    pub fn new(config: AutoencoderConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut rng = crate::rng::stream(config.seed, "vae-init", 0);
        let mut init = Init::new(&mut params, &mut rng);
        let n = config.levels();
        let top = config.width(n);

        let encoder = {
            let mut e = init.sub("encoder");
            let conv_in = Conv2d::new(&mut e.sub("conv_in"), 3, config.width(0), 3, 1)?;
            let levels = (0..n)
                .map(|i| {
                    let mut l = e.sub(format!("down.{i}"));
                    let (w, w_next) = (config.width(i), config.width(i + 1));
                    Ok((
                        ResBlock::new(&mut l.sub("res"), w, w, None)?,
                        Conv2d::new(&mut l.sub("down"), w, w_next, 3, 2)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Encoder {
                conv_in,
                levels,
                mid: ResBlock::new(&mut e.sub("mid"), top, top, None)?,
                norm_out: GroupNorm::new(&mut e.sub("norm_out"), top, NORM_GROUPS)?,
                conv_out: Conv2d::new(&mut e.sub("conv_out"), top, 2 * config.z_channels, 3, 1)?,
            }
        };
        let decoder = {
            let mut d = init.sub("decoder");
            let conv_in = Conv2d::new(&mut d.sub("conv_in"), config.z_channels, top, 3, 1)?;
            let mid = ResBlock::new(&mut d.sub("mid"), top, top, None)?;
            let levels = (0..n)
                .rev()
                .map(|i| {
                    let mut l = d.sub(format!("up.{i}"));
                    let (w, w_next) = (config.width(i), config.width(i + 1));
                    Ok((
                        ResBlock::new(&mut l.sub("res"), w_next, w_next, None)?,
                        Conv2d::new(&mut l.sub("up"), w_next, w, 3, 1)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Decoder {
                conv_in,
                mid,
                levels,
                norm_out: GroupNorm::new(&mut d.sub("norm_out"), config.width(0), NORM_GROUPS)?,
                conv_out: Conv2d::new(&mut d.sub("conv_out"), config.width(0), 3, 3, 1)?,
            }
        };
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            scale_factor: None,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn scale_factor(&self) -> Option<f64> {
        self.scale_factor
    }

    pub fn set_scale_factor(&mut self, s: f64) {
        self.scale_factor = Some(s);
    }

    pub fn encode(&self, images: &Tensor) -> Result<GaussianPosterior> {
        let (_, c, h, w) = images.dims4()?;
        let f = self.config.f;
        if c != 3 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "encoder expects (B, 3, H, W) with H, W divisible by {f}, got {:?}",
                images.dims()
            )));
        }
        let e = &self.encoder;
        let mut h = e.conv_in.forward(&images.to_dtype(self.params.dtype())?)?;
        for (res, down) in &e.levels {
            h = down.forward(&res.forward(&h, None)?)?;
        }
        let h = e.mid.forward(&h, None)?;
        let moments = e.conv_out.forward(&silu(&e.norm_out.forward(&h)?)?)?;
        let z = self.config.z_channels;
        GaussianPosterior::new(moments.narrow(1, 0, z)?, moments.narrow(1, z, z)?)
    }

    /// Unscaled latents → images in [-1, 1].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.config.z_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {:?}",
                self.config.z_channels,
                z.dims()
            )));
        }
        let d = &self.decoder;
        let mut h = d.conv_in.forward(&z.to_dtype(self.params.dtype())?)?;
        h = d.mid.forward(&h, None)?;
        for (res, up) in &d.levels {
            h = up.forward(&upsample2x(&res.forward(&h, None)?)?)?;
        }
        Ok(d.conv_out.forward(&silu(&d.norm_out.forward(&h)?)?)?.tanh()?)
    }

    pub fn require_scale(&self) -> Result<f64> {
        self.scale_factor.ok_or_else(|| {
            Error::Checkpoint("autoencoder has no scale factor; run compute_scale_factor first".into())
        })
    }

    /// Posterior means, multiplied by the stored scale factor.
    pub fn encode_latents(&self, images: &Tensor) -> Result<LatentBatch> {
        let s = self.require_scale()?;
        let mean = self.encode(images)?.mean;
        Ok(LatentBatch {
            tensor: (mean.to_dtype(DType::F32)? * s)?.detach(),
            scale_factor: s,
        })
    }

    pub fn decode_latents(&self, z: &LatentBatch) -> Result<Tensor> {
        self.decode(&(&z.tensor / z.scale_factor)?)
    }

    /// `(total, reconstruction, kl)` for one batch; `noise` drives the
    /// reparameterized draw.
    pub fn loss(&self, images: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let x = images.to_dtype(self.params.dtype())?;
        let post = self.encode(&x)?;
        let z = sample_posterior(&post, noise)?;
        let rec = (self.decode(&z)? - &x)?.abs()?.mean_all()?;
        let kl = post.kl()?;
        let total = (&rec + (&kl * self.config.kl_weight)?)?;
        Ok((total, rec, kl))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(CHECKPOINT_FORMAT, CHECKPOINT_VERSION).with_tensors("", self.params.tensors());
        ck.set_json("config", &self.config)?;
        ck.set_json("scale_factor", &self.scale_factor)?;
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
        let config: AutoencoderConfig = ck.json("config")?;
        let mut ae = Self::new(config, DType::F32)?;
        ae.params.load(&ck.tensors, "")?;
        ae.scale_factor = ck.json("scale_factor")?;
        Ok(ae)
    }
}

/// `1 / std` of the posterior-mean latents of `images`. Errors on
/// degenerate (zero or non-finite variance) latents.
pub fn compute_scale_factor(ae: &Autoencoder, images: &Tensor, batch_size: usize) -> Result<f64> {
    let n = images.dim(0)?;
    let (mut count, mut sum, mut sum_sq) = (0usize, 0f64, 0f64);
    for s in (0..n).step_by(batch_size.max(1)) {
        let len = batch_size.min(n - s);
        let z = ae.encode(&images.narrow(0, s, len)?)?.mean.to_dtype(DType::F64)?;
        count += z.elem_count();
        sum += z.sum_all()?.to_scalar::<f64>()?;
        sum_sq += z.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    scale_from_moments(count, sum, sum_sq)
}

fn scale_from_moments(count: usize, sum: f64, sum_sq: f64) -> Result<f64> {
    if count < 2 {
        return Err(Error::Numerical("need at least two latent values to estimate a scale".into()));
    }
    let mean = sum / count as f64;
    let var = (sum_sq - count as f64 * mean * mean) / (count - 1) as f64;
    if !var.is_finite() || var <= 1e-24 {
        return Err(Error::Numerical(format!("degenerate latents (variance {var:e})")));
    }
    Ok(1.0 / var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AeTrainReport {
    pub losses: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

/// Batch indices for one step: a seeded draw without replacement.
pub(crate) fn batch_indices(seed: u64, stream: &str, step: usize, n: usize, batch: usize) -> Vec<u32> {
    let mut rng = crate::rng::stream(seed, stream, step as u64);
    index::sample(&mut rng, n, batch.min(n))
        .into_iter()
        .map(|i| i as u32)
        .collect()
}

/// Trains on `images` (N × 3 × H × W, [-1, 1]) in place. Minibatches and
/// posterior noise are drawn from named seed streams, so a run is a pure
/// function of (config, data order, seed).
pub fn train_autoencoder(
    ae: &mut Autoencoder,
    images: &Tensor,
    tc: &AeTrainConfig,
    mut metrics: Option<&mut MetricsLog>,
) -> Result<AeTrainReport> {
    let n = images.dim(0)?;
    if n == 0 {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let mut opt = AdamW::new(AdamConfig {
        lr: tc.lr,
        ..Default::default()
    });
    let mut report = AeTrainReport::default();
    for step in 0..tc.steps {
        let t0 = Instant::now();
        crate::memory::reset_peak();
        let idx = batch_indices(tc.seed, "vae-batch", step, n, tc.batch_size);
        let b = idx.len();
        let batch = images.index_select(&Tensor::new(idx, images.device())?, 0)?;
        let mut rng = crate::rng::stream(tc.seed, "vae-noise", step as u64);
        let (_, _, h, w) = batch.dims4()?;
        let noise = crate::rng::normal_tensor(&mut rng, &[b, ae.config.z_channels, h / ae.config.f, w / ae.config.f])?;
        let (total, rec, kl) = ae.loss(&batch, &noise)?;
        let loss = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let rec_v = rec.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            let kl_v = kl.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            return Err(Error::NonFiniteLoss {
                step,
                loss,
                diagnostics: format!("reconstruction={rec_v}, kl={kl_v}, batch={b}"),
            });
        }
        let grads = Gradients::collect(&ae.params, &total.backward()?)?;
        opt.step(&ae.params, &grads)?;
        report.losses.push(loss);
        report.reconstruction.push(rec_v);
        if let Some(m) = metrics.as_deref_mut() {
            m.write(&StepMetrics {
                step: step as u64,
                loss,
                lr: tc.lr,
                peak_mem_bytes: crate::memory::peak_bytes().unwrap_or(0),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                loss_scale: None,
            })?;
        }
        if tc.log_every > 0 && step % tc.log_every == 0 {
            log::info!("vae step {step}: loss {loss:.5} (rec {rec_v:.5})");
        }
    }
    if let Some(m) = metrics {
        m.flush()?;
    }
    Ok(report)
}

/// Peak signal-to-noise ratio in dB for images in [-1, 1].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f64>()?;
    Ok(10.0 * (4.0 / mse.max(1e-30)).log10())
}
