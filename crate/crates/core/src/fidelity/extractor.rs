use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};

/// Maps images to feature vectors for Fréchet distance.
pub trait FeatureExtractor: Send + Sync {
    /// `images`: `(B, 3, H, W)` in [-1, 1]. Returns `B × d` rows, row-major.
    fn extract(&self, images: &Tensor) -> Result<Vec<f64>>;
    fn d(&self) -> usize;
    /// Logged with every score so numbers from different extractors are
    /// never compared by accident.
    fn id(&self) -> String;
}

/// Frozen, seeded three-layer convolutional feature extractor.
///
/// Each stride-2 conv is followed by a leaky ReLU; the last feature map is
/// mean-pooled and concatenated with its spatial standard deviation, so
/// both colour/intensity shifts and texture changes move the features.
pub struct ToyExtractor {
    convs: Vec<Conv2d>,
    seed: u64,
    d: usize,
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = crate::rng::stream(seed, "toy-extractor", 0);
        let mut init = Init::new(&mut store, &mut rng);
        let widths = [3, 16, 32, 32];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut init.sub(i), w[0], w[1], 3, 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs, seed, d: 64 })
    }
}

impl FeatureExtractor for ToyExtractor {
    fn extract(&self, images: &Tensor) -> Result<Vec<f64>> {
        let (b, c, _, _) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB images, got {c} channels")));
        }
        let mut h = images.to_dtype(DType::F32)?;
        for conv in &self.convs {
            let y = conv.forward(&h)?;
            h = y.maximum(&(&y * 0.1)?)?;
        }
        let flat = h.flatten_from(2)?;
        let mean = flat.mean_keepdim(2)?;
        let std = flat.broadcast_sub(&mean)?.sqr()?.mean(2)?.sqrt()?;
        let feats = Tensor::cat(&[mean.squeeze(2)?, std], 1)?;
        debug_assert_eq!(feats.dims(), &[b, self.d]);
        Ok(feats
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    fn d(&self) -> usize {
        self.d
    }

    fn id(&self) -> String {
        format!("toy-conv3:seed={}:d={}", self.seed, self.d)
    }
}

/// Resolves an extractor by CLI/config name.
pub fn by_name(name: &str, seed: u64) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "toy" => Ok(Box::new(ToyExtractor::new(seed)?)),
        "inception" => Err(Error::Config(
            "the inception extractor needs pretrained weights, which are not bundled; \
             implement FeatureExtractor over your own weights or use `toy`"
                .into(),
        )),
        other => Err(Error::Config(format!("unknown feature extractor `{other}` (expected toy or inception)"))),
    }
}
