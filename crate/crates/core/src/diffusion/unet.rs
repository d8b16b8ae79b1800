//! Time- and text-conditioned U-Net noise predictor.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::schedule::timestep_embedding;
use crate::error::{Error, Result};
use crate::nn::{
    silu, upsample2x, Attention, Conv2d, GroupNorm, Init, LayerNorm, Linear, ParamStore, ResBlock, NORM_GROUPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Latent channels (the autoencoder's z_channels).
    pub in_channels: usize,
    pub base_width: usize,
    pub channel_mult: Vec<usize>,
    /// Levels (0 = full latent resolution) that get a transformer block
    /// with self- and cross-attention. The middle block always has one.
    pub attention_levels: Vec<usize>,
    /// Text embedding width (d_embed).
    pub context_dim: usize,
    /// n_windows · 77.
    pub context_len: usize,
    pub time_embed_dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_width: 32,
            channel_mult: vec![1, 2],
            attention_levels: vec![0, 1],
            context_dim: 64,
            context_len: 77,
            time_embed_dim: 128,
            heads: 4,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::Config("channel_mult must be non-empty and positive".into()));
        }
        if let Some(l) = self.attention_levels.iter().find(|l| **l >= self.channel_mult.len()) {
            return Err(Error::Config(format!(
                "attention level {l} does not exist ({} levels)",
                self.channel_mult.len()
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.context_dim == 0 || self.context_len == 0 {
            return Err(Error::Config("U-Net widths and context sizes must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.heads == 0 {
            return Err(Error::Config("time_embed_dim ≥ 2 and heads ≥ 1 required".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }
}

/// Norm → 1×1 in → [self-attn, cross-attn, feed-forward] with pre-norm
/// residuals → zero-initialized 1×1 out, added to the input.
#[derive(Debug, Clone)]
struct TransformerBlock {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    proj_out: Conv2d,
}

impl TransformerBlock {
    fn new(init: &mut Init, ch: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut init.sub("norm"), ch, NORM_GROUPS)?,
            proj_in: Conv2d::new(&mut init.sub("proj_in"), ch, ch, 1, 1)?,
            ln1: LayerNorm::new(&mut init.sub("ln1"), ch)?,
            self_attn: Attention::new(&mut init.sub("self_attn"), ch, ch, heads)?,
            ln2: LayerNorm::new(&mut init.sub("ln2"), ch)?,
            cross_attn: Attention::new(&mut init.sub("cross_attn"), ch, context_dim, heads)?,
            ln3: LayerNorm::new(&mut init.sub("ln3"), ch)?,
            ff_in: Linear::new(&mut init.sub("ff_in"), ch, 4 * ch, true)?,
            ff_out: Linear::new(&mut init.sub("ff_out"), 4 * ch, ch, true)?,
            proj_out: Conv2d::zeros(&mut init.sub("proj_out"), ch, ch, 1)?,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = self.proj_in.forward(&self.norm.forward(x)?)?;
        let mut t = t.flatten_from(2)?.transpose(1, 2)?.contiguous()?; // (B, HW, C)
        t = (&t + self.self_attn.forward(&self.ln1.forward(&t)?, None)?)?;
        t = (&t + self.cross_attn.forward(&self.ln2.forward(&t)?, Some(context))?)?;
        let ff = self.ff_out.forward(&silu(&self.ff_in.forward(&self.ln3.forward(&t)?)?)?)?;
        t = (&t + ff)?;
        let t = t.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + self.proj_out.forward(&t)?)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<TransformerBlock>,
}

impl Level {
    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, Some(temb))?;
        match &self.attn {
            Some(a) => a.forward(&h, ctx),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: TransformerBlock,
    mid2: ResBlock,
    up: Vec<Level>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    /// Fresh weights from `config.seed`; master copies stored in `dtype`.
    /// The output convolution starts at zero, as do the transformer output
    /// projections.
    pub fn new(config: UNetConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut rng = crate::rng::stream(config.seed, "unet-init", 0);
        let mut init = Init::new(&mut params, &mut rng);
        let c = &config;
        let n = c.channel_mult.len();
        let (td, ctx, heads) = (c.time_embed_dim, c.context_dim, c.heads);
        let level = |init: &mut Init, name: String, cin: usize, cout: usize, l: usize| -> Result<Level> {
            let mut s = init.sub(name);
            Ok(Level {
                res: ResBlock::new(&mut s.sub("res"), cin, cout, Some(td))?,
                attn: if c.attention_levels.contains(&l) {
                    Some(TransformerBlock::new(&mut s.sub("attn"), cout, ctx, heads)?)
                } else {
                    None
                },
            })
        };

        let time_in = Linear::new(&mut init.sub("time_in"), td, td, true)?;
        let time_out = Linear::new(&mut init.sub("time_out"), td, td, true)?;
        let conv_in = Conv2d::new(&mut init.sub("conv_in"), c.in_channels, c.width(0), 3, 1)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = c.width(0);
        for l in 0..n {
            down.push(level(&mut init, format!("down.{l}"), prev, c.width(l), l)?);
            prev = c.width(l);
            if l + 1 < n {
                downsample.push(Conv2d::new(&mut init.sub(format!("downsample.{l}")), prev, prev, 3, 2)?);
            }
        }
        let top = c.width(n - 1);
        let mid1 = ResBlock::new(&mut init.sub("mid.res1"), top, top, Some(td))?;
        let mid_attn = TransformerBlock::new(&mut init.sub("mid.attn"), top, ctx, heads)?;
        let mid2 = ResBlock::new(&mut init.sub("mid.res2"), top, top, Some(td))?;
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut cur = top;
        for l in (0..n).rev() {
            up.push(level(&mut init, format!("up.{l}"), cur + c.width(l), c.width(l), l)?);
            cur = c.width(l);
            if l > 0 {
                upsample.push(Conv2d::new(&mut init.sub(format!("upsample.{l}")), cur, cur, 3, 1)?);
            }
        }
        let norm_out = GroupNorm::new(&mut init.sub("norm_out"), c.width(0), NORM_GROUPS)?;
        let conv_out = Conv2d::zeros(&mut init.sub("conv_out"), c.width(0), c.in_channels, 3)?;
        Ok(Self {
            config,
            params,
            time_in,
            time_out,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Checks `z_t` (B, C, H, W) and `context` (B, context_len, context_dim)
    /// against the configuration.
    pub fn check_inputs(&self, z_t: &Tensor, t: &[usize], context: &Tensor) -> Result<()> {
        let (b, c, h, w) = z_t.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "U-Net expects {} latent channels, got {:?}",
                self.config.in_channels,
                z_t.dims()
            )));
        }
        let down = 1 << (self.config.channel_mult.len() - 1);
        if h % down != 0 || w % down != 0 {
            return Err(Error::Shape(format!("latent {h}×{w} not divisible by {down}")));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch {b}", t.len())));
        }
        let expect = [b, self.config.context_len, self.config.context_dim];
        if context.dims() != expect {
            return Err(Error::Shape(format!(
                "context is {:?}, the U-Net was built for {:?} (context_len = n_windows·77 must match the text conditioner)",
                context.dims(),
                expect
            )));
        }
        Ok(())
    }

    /// ε̂(z_t, t, c). Computes in the dtype of `z_t`; the caller casts inputs
    /// explicitly (see `PrecisionPolicy`). Context is cast to match.
    pub fn forward(&self, z_t: &Tensor, t: &[usize], context: &Tensor) -> Result<Tensor> {
        self.check_inputs(z_t, t, context)?;
        let dt = z_t.dtype();
        let ctx = context.to_dtype(dt)?;
        let temb = timestep_embedding(t, self.config.time_embed_dim, dt)?;
        let temb = self.time_out.forward(&silu(&self.time_in.forward(&temb)?)?)?;
        let temb = silu(&temb)?;

        let mut h = self.conv_in.forward(z_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, level) in self.down.iter().enumerate() {
            h = level.forward(&h, &temb, &ctx)?;
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(l) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, Some(&temb))?;
        h = self.mid_attn.forward(&h, &ctx)?;
        h = self.mid2.forward(&h, Some(&temb))?;
        for (i, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = level.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, &ctx)?;
            if let Some(us) = self.upsample.get(i) {
                h = us.forward(&upsample2x(&h)?)?;
            }
        }
        self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    pub(crate) fn tiny(context_len: usize) -> UNetConfig {
        UNetConfig {
            base_width: 16,
            time_embed_dim: 32,
            context_dim: 8,
            context_len,
            heads: 2,
            ..Default::default()
        }
    }

    fn inputs(b: usize, cfg: &UNetConfig, seed: u64) -> (Tensor, Tensor) {
        let mut rng = crate::rng::stream(seed, "unet-test", 0);
        (
            crate::rng::normal_tensor(&mut rng, &[b, 4, 8, 8]).unwrap(),
            crate::rng::normal_tensor(&mut rng, &[b, cfg.context_len, cfg.context_dim]).unwrap(),
        )
    }

    /// Randomizes the zero-initialized output layers so outputs depend on
    /// everything.
    fn perturb(unet: &UNet) {
        let mut rng = crate::rng::stream(9, "perturb", 0);
        for (_, v) in unet.params().iter() {
            let noise = crate::rng::normal_tensor(&mut rng, v.dims()).unwrap().to_dtype(v.dtype()).unwrap();
            v.set(&(v.as_tensor() + (noise * 0.05).unwrap()).unwrap()).unwrap();
        }
    }

    #[test]
    fn zero_init_output_and_shape() {
        let cfg = tiny(77);
        let unet = UNet::new(cfg.clone(), DType::F32).unwrap();
        let (z, ctx) = inputs(2, &cfg, 0);
        let y = unet.forward(&z, &[10, 500], &ctx).unwrap();
        assert_eq!(y.dims(), z.dims());
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn deterministic_and_batch_equivariant() {
        let cfg = tiny(77);
        let unet = UNet::new(cfg.clone(), DType::F32).unwrap();
        perturb(&unet);
        let (z, ctx) = inputs(3, &cfg, 1);
        let t = [5, 200, 999];
        let a = unet.forward(&z, &t, &ctx).unwrap();
        let b = unet.forward(&z, &t, &ctx).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let pz = z.index_select(&perm, 0).unwrap();
        let pc = ctx.index_select(&perm, 0).unwrap();
        let out = unet.forward(&pz, &[999, 5, 200], &pc).unwrap();
        let expect = a.index_select(&perm, 0).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_keepdim(0).unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn context_affects_output_and_mismatch_fails_loudly() {
        let cfg = tiny(77);
        let unet = UNet::new(cfg.clone(), DType::F32).unwrap();
        perturb(&unet);
        let (z, ctx) = inputs(1, &cfg, 2);
        let other = (&ctx * -1.0).unwrap();
        let a = unet.forward(&z, &[100], &ctx).unwrap();
        let b = unet.forward(&z, &[100], &other).unwrap();
        assert!((a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0);
        let long = Tensor::zeros((1, 154, 8), DType::F32, &Device::Cpu).unwrap();
        let err = unet.forward(&z, &[100], &long).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn half_precision_forward_is_finite() {
        let cfg = tiny(154);
        let unet = UNet::new(cfg.clone(), DType::F32).unwrap();
        perturb(&unet);
        let (z, ctx) = inputs(2, &cfg, 3);
        let y = unet
            .forward(&z.to_dtype(DType::F16).unwrap(), &[1, 1000], &ctx.to_dtype(DType::F16).unwrap())
            .unwrap();
        assert_eq!(y.dtype(), DType::F16);
        let v = y.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        let full = unet.forward(&z, &[1, 1000], &ctx).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let err = v.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            UNetConfig { channel_mult: vec![], ..tiny(77) },
            UNetConfig { attention_levels: vec![2], ..tiny(77) },
            UNetConfig { context_len: 0, ..tiny(77) },
        ] {
            assert!(UNet::new(bad, DType::F32).is_err());
        }
    }
}
