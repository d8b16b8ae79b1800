//! Fréchet distance between Gaussian fits of image features.

mod extractor;
mod stats;

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use extractor::{by_name as extractor_by_name, FeatureExtractor, ToyExtractor};
pub use stats::{frechet_distance, sqrtm_product, FeatureStats, Frechet, SqrtmResult, StatsFile};

use crate::error::{Error, Result};
use crate::imageio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidConfig {
    pub extractor: String,
    pub extractor_seed: u64,
    pub batch_size: usize,
    pub eps_stab: f64,
}

impl Default for FidConfig {
    fn default() -> Self {
        Self {
            extractor: "toy".into(),
            extractor_seed: 0,
            batch_size: 64,
            eps_stab: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub enum RealSource {
    Dir(PathBuf),
    Stats(PathBuf),
}

impl RealSource {
    /// A path to an existing directory is read as images, anything else as
    /// a stats file.
    pub fn from_path(p: &Path) -> Self {
        if p.is_dir() {
            Self::Dir(p.to_path_buf())
        } else {
            Self::Stats(p.to_path_buf())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub n_real: u64,
    pub n_fake: u64,
    pub extractor_id: String,
    pub stabilized_with: Option<f64>,
    pub real: String,
    pub fake: String,
    pub config: FidConfig,
}

/// Feature statistics of a `(N, 3, H, W)` image tensor, in batches.
pub fn stats_for_tensor(images: &Tensor, extractor: &dyn FeatureExtractor, batch_size: usize) -> Result<FeatureStats> {
    let n = images.dim(0)?;
    let starts: Vec<usize> = (0..n).step_by(batch_size.max(1)).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let len = batch_size.min(n - s);
            let feats = extractor.extract(&images.narrow(0, s, len)?)?;
            let mut st = FeatureStats::new(extractor.d());
            st.accumulate(&feats, len)?;
            Ok(st)
        })
        .collect::<Result<Vec<_>>>()?;
    parts
        .iter()
        .try_fold(FeatureStats::new(extractor.d()), |acc, p| acc.merged(p))
}

pub fn stats_for_paths(paths: &[PathBuf], extractor: &dyn FeatureExtractor, batch_size: usize) -> Result<FeatureStats> {
    let mut stats = FeatureStats::new(extractor.d());
    for chunk in paths.chunks(batch_size.max(1)) {
        let batch = imageio::load_batch(chunk)?;
        let feats = extractor.extract(&batch)?;
        stats.accumulate(&feats, chunk.len())?;
    }
    Ok(stats)
}

pub fn stats_for_dir(dir: &Path, extractor: &dyn FeatureExtractor, batch_size: usize) -> Result<FeatureStats> {
    let paths = imageio::list_pngs(dir)?;
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG images in {}", dir.display())));
    }
    stats_for_paths(&paths, extractor, batch_size)
}

pub fn score(
    real: &RealSource,
    fake_dir: &Path,
    extractor: &dyn FeatureExtractor,
    config: &FidConfig,
) -> Result<FidReport> {
    let (real_stats, real_desc) = match real {
        RealSource::Dir(d) => (stats_for_dir(d, extractor, config.batch_size)?, d.display().to_string()),
        RealSource::Stats(p) => {
            let file = StatsFile::read(p)?;
            if file.extractor_id != extractor.id() {
                return Err(Error::InvalidArgument(format!(
                    "stats in {} were computed with `{}`, not `{}`",
                    p.display(),
                    file.extractor_id,
                    extractor.id()
                )));
            }
            (file.stats, p.display().to_string())
        }
    };
    let fake_stats = stats_for_dir(fake_dir, extractor, config.batch_size)?;
    for (side, s) in [("real", &real_stats), ("fake", &fake_stats)] {
        if s.n() < 2 {
            return Err(Error::InvalidArgument(format!("{side} side has {} image(s); need at least 2", s.n())));
        }
    }
    let f = frechet_distance(&real_stats, &fake_stats, config.eps_stab)?;
    Ok(FidReport {
        fid: f.distance,
        n_real: real_stats.n(),
        n_fake: fake_stats.n(),
        extractor_id: extractor.id(),
        stabilized_with: f.stabilized_with,
        real: real_desc,
        fake: fake_dir.display().to_string(),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn textures(n: usize, seed: u64, noise: f64) -> Tensor {
        let mut rng = crate::rng::stream(seed, "tex", 0);
        let base = Tensor::arange(0f32, 16.0, &Device::Cpu)
            .unwrap()
            .affine(0.4, 0.0)
            .unwrap()
            .sin()
            .unwrap();
        let grid = base.unsqueeze(0).unwrap().broadcast_mul(&base.unsqueeze(1).unwrap()).unwrap();
        let clean = grid.broadcast_as((n, 3, 16, 16)).unwrap().affine(0.6, 0.0).unwrap();
        let eps = Tensor::from_vec(crate::rng::normal_vec_f32(&mut rng, n * 3 * 256), (n, 3, 16, 16), &Device::Cpu).unwrap();
        (clean + (eps * noise).unwrap()).unwrap().clamp(-1f32, 1f32).unwrap()
    }

    #[test]
    fn toy_extractor_is_deterministic() {
        let ex = ToyExtractor::new(3).unwrap();
        let x = textures(4, 0, 0.1);
        assert_eq!(ex.extract(&x).unwrap(), ex.extract(&x).unwrap());
        assert_eq!(ex.extract(&x).unwrap().len(), 4 * 64);
        let other = ToyExtractor::new(4).unwrap();
        assert_ne!(ex.extract(&x).unwrap(), other.extract(&x).unwrap());
    }

    #[test]
    fn noise_degrades_monotonically() {
        let ex = ToyExtractor::new(0).unwrap();
        let real = stats_for_tensor(&textures(64, 1, 0.05), &ex, 16).unwrap();
        let mut last = -1.0;
        for (i, noise) in [0.05, 0.2, 0.5, 1.0].iter().enumerate() {
            let fake = stats_for_tensor(&textures(64, 2 + i as u64, *noise), &ex, 16).unwrap();
            let fid = frechet_distance(&real, &fake, 1e-6).unwrap().distance;
            assert!(fid >= last, "noise {noise}: {fid} < {last}");
            last = fid;
        }
    }

    #[test]
    fn scoring_directories_and_cached_stats() {
        let dir = tempfile::tempdir().unwrap();
        let real_dir = dir.path().join("real");
        let noisy_dir = dir.path().join("noisy");
        let held_dir = dir.path().join("held");
        for (d, seed, noise) in [(&real_dir, 1, 0.05), (&held_dir, 2, 0.05), (&noisy_dir, 3, 0.8)] {
            let imgs = textures(12, seed, noise);
            for i in 0..12 {
                imageio::save_rgb(&imgs.get(i).unwrap(), &d.join(format!("{i:03}.png"))).unwrap();
            }
        }
        let ex = ToyExtractor::new(0).unwrap();
        let cfg = FidConfig {
            batch_size: 5,
            ..Default::default()
        };
        let same = score(&RealSource::Dir(real_dir.clone()), &real_dir, &ex, &cfg).unwrap();
        assert!(same.fid < 1e-6);
        assert_eq!((same.n_real, same.n_fake), (12, 12));
        let held = score(&RealSource::Dir(real_dir.clone()), &held_dir, &ex, &cfg).unwrap();
        let noisy = score(&RealSource::Dir(real_dir.clone()), &noisy_dir, &ex, &cfg).unwrap();
        assert!(noisy.fid > held.fid);

        let stats_path = dir.path().join("real.stats");
        StatsFile {
            extractor_id: ex.id(),
            stats: stats_for_dir(&real_dir, &ex, 5).unwrap(),
        }
        .write(&stats_path)
        .unwrap();
        let cached = score(&RealSource::from_path(&stats_path), &noisy_dir, &ex, &cfg).unwrap();
        assert!((cached.fid - noisy.fid).abs() <= 1e-10 * noisy.fid.max(1.0));

        let other = ToyExtractor::new(9).unwrap();
        assert!(score(&RealSource::Stats(stats_path), &noisy_dir, &other, &cfg).is_err());
        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(score(&RealSource::Dir(real_dir), &empty, &ex, &cfg).is_err());
    }

    #[test]
    fn inception_is_reported_as_unavailable() {
        let err = extractor_by_name("inception", 0).err().unwrap().to_string();
        assert!(err.contains("not bundled"));
        assert!(extractor_by_name("toy", 0).is_ok());
    }
}
