//! Residual and resampling blocks shared by the autoencoder and the U-Net.

use candle_core::Tensor;

use super::fused::silu;
use super::{Conv2d, GroupNorm, Init, Linear};
use crate::error::Result;

pub const NORM_GROUPS: usize = 8;

/// GroupNorm → SiLU → conv, twice, with an optional additive time
/// embedding between the two convs and a 1×1 skip when widths differ.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, temb_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut init.sub("norm1"), in_ch, NORM_GROUPS)?,
            conv1: Conv2d::new(&mut init.sub("conv1"), in_ch, out_ch, 3, 1)?,
            temb: temb_dim
                .map(|d| Linear::new(&mut init.sub("temb"), d, out_ch, true))
                .transpose()?,
            norm2: GroupNorm::new(&mut init.sub("norm2"), out_ch, NORM_GROUPS)?,
            conv2: Conv2d::new(&mut init.sub("conv2"), out_ch, out_ch, 3, 1)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(&mut init.sub("skip"), in_ch, out_ch, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// `temb`: (B × temb_dim), already passed through its nonlinearity.
    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let t = proj.forward(t)?;
            h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}
