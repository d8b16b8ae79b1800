mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use common::diffusion::*;
use histogen::diffusion::{
    noise_loss_in, LdmData, LdmTrainConfig, LdmTrainer, PrecisionPolicy, ScheduleConfig, UNet, UNetConfig,
};

fn small_unet(context_len: usize, seed: u64) -> UNetConfig {
    UNetConfig {
        base_width: 8,
        time_embed_dim: 16,
        context_dim: 8,
        context_len,
        heads: 2,
        seed,
        ..Default::default()
    }
}

/// `n` latents of shape (4, 4, 4) with `captions` distinct random contexts.
fn data(n: usize, captions: usize, context_len: usize, seed: u64) -> LdmData {
    let mut rng = histogen::rng::stream(seed, "ldm-test-data", 0);
    let latents = histogen::rng::normal_tensor(&mut rng, &[n, 4, 4, 4]).unwrap();
    let contexts = (0..captions)
        .map(|_| histogen::rng::normal_tensor(&mut rng, &[context_len, 8]).unwrap())
        .collect();
    let null = Tensor::zeros((context_len, 8), DType::F32, &Device::Cpu).unwrap();
    let caption_of = (0..n as u32).map(|i| i % captions as u32).collect();
    LdmData::from_parts(latents, contexts, caption_of, null).unwrap()
}

fn train_config(batch: usize, accum: usize, iters: u64) -> LdmTrainConfig {
    LdmTrainConfig {
        batch_size: batch,
        grad_accum_steps: accum,
        max_iterations: iters,
        lr: 1e-3,
        seed: 3,
        checkpoint_every: 0,
        log_every: 0,
        ..Default::default()
    }
}

fn params_f64(unet: &UNet) -> BTreeMap<String, Vec<f64>> {
    unet.params()
        .iter()
        .map(|(n, v)| {
            let flat = v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap();
            (n.clone(), flat.to_vec1::<f64>().unwrap())
        })
        .collect()
}

#[test]
fn resumed_run_is_bitwise_identical() {
    let d = data(16, 4, 8, 0);
    let schedule = ScheduleConfig::default();

    let mut straight = LdmTrainer::new(UNet::new(small_unet(8, 1), DType::F32).unwrap(), schedule.clone(), train_config(4, 1, 6)).unwrap();
    straight.train(&d, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = LdmTrainer::new(UNet::new(small_unet(8, 1), DType::F32).unwrap(), schedule, train_config(4, 1, 3)).unwrap();
    first.train(&d, None, Some(dir.path())).unwrap();
    let ck = dir.path().join("ldm-last.safetensors");
    let mut resumed = LdmTrainer::load(&ck, Some(train_config(4, 1, 6))).unwrap();
    assert_eq!(resumed.step(), 3);
    resumed.train(&d, None, None).unwrap();

    let (a, b) = (params_f64(straight.unet()), params_f64(resumed.unet()));
    for (name, va) in &a {
        let vb = &b[name];
        assert!(
            va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()),
            "parameter {name} differs after resume"
        );
    }
}

#[test]
fn accumulated_gradients_match_the_full_batch() {
    let d = data(48, 6, 8, 1);
    let unet = UNet::new(small_unet(8, 2), DType::F32).unwrap();
    perturb(unet.params(), 4, 0.05);
    let saved = unet.params().tensors();
    let full = LdmTrainer::new(unet, ScheduleConfig::default(), train_config(32, 1, 1)).unwrap();
    let unet2 = UNet::new(small_unet(8, 2), DType::F32).unwrap();
    unet2.params().load(&saved, "").unwrap();
    let split = LdmTrainer::new(unet2, ScheduleConfig::default(), train_config(8, 4, 1)).unwrap();

    for step in [0, 5] {
        let (ga, la) = full.gradients(&d, step).unwrap();
        let (gb, lb) = split.gradients(&d, step).unwrap();
        assert!((la - lb).abs() <= 1e-5 * la.abs(), "loss {la} vs {lb}");
        let (fa, fb) = (ga.flatten().unwrap(), gb.flatten().unwrap());
        let scale = fa.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = fa.iter().zip(&fb).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(worst <= 1e-5 * scale, "step {step}: max deviation {worst} vs max |g| {scale}");
    }
}

#[test]
fn mixed_precision_run_completes_with_a_loss_scale() {
    let d = data(8, 2, 8, 2);
    let mut cfg = train_config(4, 1, 2);
    cfg.precision = PrecisionPolicy::mixed16();
    let mut tr = LdmTrainer::new(UNet::new(small_unet(8, 3), DType::F32).unwrap(), ScheduleConfig::default(), cfg).unwrap();
    let reports = tr.train(&d, None, None).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert!(r.loss.is_finite());
        assert!(r.loss_scale >= 1.0);
    }
    assert_eq!(tr.unet().params().dtype(), DType::F32);
}

#[test]
fn iterated_kernel_matches_closed_form_moments() {
    let schedule = ScheduleConfig::default().build().unwrap();
    let n = 4000;
    let mut rng = histogen::rng::stream(8, "q-moments", 0);
    let z0 = Tensor::from_vec((0..n * 4).map(|i| 0.5 + (i % 4) as f64 * 0.25).collect::<Vec<_>>(), (n, 1, 2, 2), &Device::Cpu).unwrap();
    for t_target in [1usize, 10, 200] {
        let mut z = z0.clone();
        for t in 1..=t_target {
            let eps = Tensor::from_vec((0..n * 4).map(|_| normal(&mut rng)).collect::<Vec<_>>(), (n, 1, 2, 2), &Device::Cpu).unwrap();
            z = schedule.q_step(&z, &vec![t; n], &eps).unwrap();
        }
        let eps = Tensor::from_vec((0..n * 4).map(|_| normal(&mut rng)).collect::<Vec<_>>(), (n, 1, 2, 2), &Device::Cpu).unwrap();
        let closed = schedule.q_sample(&z0, &vec![t_target; n], &eps).unwrap();
        let it = z.flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
        let cf = closed.flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
        let ab = alpha_bars(&betas_of(&schedule))[t_target];
        for c in 0..4 {
            let a: Vec<f64> = it.iter().map(|r| r[c]).collect();
            let b: Vec<f64> = cf.iter().map(|r| r[c]).collect();
            let ((ma, va), (mb, vb)) = (mean_var(&a), mean_var(&b));
            let sd = (1.0 - ab).sqrt();
            let se = sd / (n as f64).sqrt();
            assert!((ma - mb).abs() < 6.0 * se, "t={t_target} c={c}: means {ma} vs {mb}");
            assert!(((ma + mb) / 2.0 - ab.sqrt() * (0.5 + c as f64 * 0.25)).abs() < 6.0 * se);
            assert!((va / vb - 1.0).abs() < 0.15, "t={t_target} c={c}: variances {va} vs {vb}");
            assert!((vb / (1.0 - ab) - 1.0).abs() < 0.15);
        }
    }
}

#[test]
fn unet_loss_gradients_match_central_differences_in_f64() {
    let cfg = UNetConfig { base_width: 8, ..small_unet(8, 5) };
    let unet = UNet::new(cfg, DType::F64).unwrap();
    perturb(unet.params(), 6, 0.05);
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut rng = histogen::rng::stream(6, "gradcheck-data", 0);
    let z0 = histogen::rng::normal_tensor(&mut rng, &[2, 4, 4, 4]).unwrap().to_dtype(DType::F64).unwrap();
    let eps = histogen::rng::normal_tensor(&mut rng, &[2, 4, 4, 4]).unwrap().to_dtype(DType::F64).unwrap();
    let ctx = histogen::rng::normal_tensor(&mut rng, &[2, 8, 8]).unwrap().to_dtype(DType::F64).unwrap();
    let t = [30usize, 700];
    let loss = || noise_loss_in(&unet, &schedule, &z0, &t, &eps, &ctx, DType::F64).unwrap();
    let grads = loss().backward().unwrap();
    let analytic = unet
        .params()
        .iter()
        .map(|(n, v)| {
            let g = grads.get(v).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
            (n.clone(), g.unwrap_or_else(|| vec![0.0; v.elem_count()]))
        })
        .collect();
    let value = || loss().to_scalar::<f64>().unwrap();
    let samples = central_differences(unet.params(), &analytic, value, 12, 1e-5, 1e-7, 7);
    for s in &samples {
        assert!(s.relative_error() < 1e-3, "{s:?}");
    }
}

#[test]
fn short_training_run_reduces_the_loss() {
    // structured latents: the same smooth pattern per caption, small noise
    let n = 32;
    let mut rng = histogen::rng::stream(12, "pattern", 0);
    let pattern: Vec<f32> = (0..64).map(|i| ((i as f32) * 0.37).sin()).collect();
    let lat: Vec<f32> = (0..n)
        .flat_map(|_| pattern.iter().map(|&p| p + 0.05 * normal(&mut rng) as f32).collect::<Vec<_>>())
        .collect();
    let latents = Tensor::from_vec(lat, (n, 4, 4, 4), &Device::Cpu).unwrap();
    let ctx = Tensor::zeros((8, 8), DType::F32, &Device::Cpu).unwrap();
    let d = LdmData::from_parts(latents, vec![ctx.clone()], vec![0; n], ctx).unwrap();
    let mut cfg = train_config(16, 1, 300);
    cfg.lr = 2e-3;
    let mut tr = LdmTrainer::new(UNet::new(small_unet(8, 9), DType::F32).unwrap(), ScheduleConfig::default(), cfg).unwrap();
    let reports = tr.train(&d, None, None).unwrap();
    let head: f64 = reports[..30].iter().map(|r| r.loss).sum::<f64>() / 30.0;
    let tail: f64 = reports[270..].iter().map(|r| r.loss).sum::<f64>() / 30.0;
    assert!(tail < 0.7 * head, "loss {head} → {tail}");
}
