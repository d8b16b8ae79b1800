//! Staged workflow: corpus → summarize → vae → train-ldm → sample → fid,
//! with every artifact under one run directory and explicit hand-offs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{compute_scale_factor, psnr, train_autoencoder, Autoencoder};
use crate::config::{ClientKind, PipelineConfig};
use crate::corpus::{self, Manifest, PatchRecord, Split, SplitSpec};
use crate::diffusion::{load_model, LdmData, LdmTrainConfig, LdmTrainer, UNet};
use crate::error::{Error, IoContext, Result};
use crate::fidelity::{self, FeatureExtractor, FidReport, RealSource, StatsFile};
use crate::metrics::{read_metrics, smoothed, MetricsLog};
use crate::sampler::{checkpoint_hashes, Generator};
use crate::summarizer::{self, CompletionClient, CorpusOptions, HttpClient, MockClient, PromptChain, SummaryCache};

/// EMA weight used when reporting smoothed training losses.
pub const LOSS_SMOOTHING: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Corpus,
    Summarize,
    Vae,
    TrainLdm,
    Sample,
    Fid,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Corpus,
        Stage::Summarize,
        Stage::Vae,
        Stage::TrainLdm,
        Stage::Sample,
        Stage::Fid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Summarize => "summarize",
            Stage::Vae => "vae",
            Stage::TrainLdm => "train-ldm",
            Stage::Sample => "sample",
            Stage::Fid => "fid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }

    /// Stages whose artifacts this one reads.
    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Corpus => &[],
            Stage::Summarize => &[Stage::Corpus],
            Stage::Vae => &[Stage::Corpus],
            Stage::TrainLdm => &[Stage::Summarize, Stage::Vae],
            Stage::Sample => &[Stage::Summarize, Stage::Vae, Stage::TrainLdm],
            Stage::Fid => &[Stage::Corpus, Stage::Sample],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where each artifact lives inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.yaml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("corpus/manifest.jsonl")
    }
    pub fn splits(&self) -> PathBuf {
        self.root.join("corpus/splits.json")
    }
    pub fn captioned_manifest(&self) -> PathBuf {
        self.root.join("summaries/manifest.jsonl")
    }
    pub fn summary_report(&self) -> PathBuf {
        self.root.join("summaries/report.json")
    }
    pub fn summary_cache(&self) -> PathBuf {
        self.root.join("summaries/cache.jsonl")
    }
    pub fn vae_checkpoint(&self) -> PathBuf {
        self.root.join("vae/vae.safetensors")
    }
    pub fn vae_metrics(&self) -> PathBuf {
        self.root.join("vae/metrics.jsonl")
    }
    pub fn ldm_dir(&self) -> PathBuf {
        self.root.join("ldm")
    }
    pub fn ldm_checkpoint(&self) -> PathBuf {
        self.root.join("ldm/ldm-last.safetensors")
    }
    pub fn ldm_metrics(&self) -> PathBuf {
        self.root.join("ldm/metrics.jsonl")
    }
    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn fid_report(&self) -> PathBuf {
        self.root.join("fid/report.json")
    }
    pub fn real_stats(&self) -> PathBuf {
        self.root.join("fid/real.stats")
    }
    pub fn noise_dir(&self) -> PathBuf {
        self.root.join("fid/noise")
    }
    pub fn stage_report(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("reports/{}.json", stage.name()))
    }

    /// The file whose presence marks `stage` as done.
    pub fn product(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Corpus => self.manifest(),
            Stage::Summarize => self.captioned_manifest(),
            Stage::Vae => self.vae_checkpoint(),
            Stage::TrainLdm => self.ldm_checkpoint(),
            Stage::Sample => self.samples_dir().join("manifest.jsonl"),
            Stage::Fid => self.fid_report(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub run_id: String,
    pub wall_s: f64,
    /// Relative path → SHA-256 of every artifact the stage wrote.
    pub artifacts: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

/// Outcome of the FID stage: the generated set and a pure-noise baseline,
/// both against the held-out images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidStageReport {
    pub generated: FidReport,
    pub noise_baseline: FidReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdmStageDetails {
    pub steps: u64,
    pub initial_loss: f64,
    pub final_smoothed_loss: f64,
    pub peak_mem_bytes: u64,
    pub context_len: usize,
}

pub struct Pipeline {
    config: PipelineConfig,
    layout: RunLayout,
}

fn sha(path: &Path) -> Result<String> {
    crate::checkpoint::file_sha256(path)
}

fn json_write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    crate::checkpoint::write_atomic(path, &bytes)
}

fn json_read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path).at(path)?)?)
}

impl Pipeline {
    /// Resolves seeds, validates, and writes the config snapshot into the
    /// run directory.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let config = config.resolve()?;
        let layout = RunLayout::new(&config.paths.run_dir);
        std::fs::create_dir_all(&layout.root).at(&layout.root)?;
        crate::checkpoint::write_atomic(&layout.config_snapshot(), config.to_yaml()?.as_bytes())?;
        Ok(Self { config, layout })
    }

    /// Reopens a run from its snapshot alone.
    pub fn from_snapshot(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::new(PipelineConfig::from_yaml(&text)?)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.layout.root).unwrap_or(p).display().to_string()
    }

    fn require(&self, stage: Stage, planned: &[Stage]) -> Result<()> {
        for &dep in stage.requires() {
            let product = self.layout.product(dep);
            if !planned.contains(&dep) && !product.exists() {
                return Err(Error::MissingPrerequisite {
                    what: format!("{} (needed by `{stage}`)", product.display()),
                    stage: dep.name(),
                });
            }
        }
        if stage == Stage::Corpus {
            let p = &self.config.paths;
            for (what, path) in [("image_dir", &p.image_dir), ("reports", &p.reports), ("scores", &p.scores)] {
                if !path.exists() {
                    return Err(Error::MissingPrerequisite {
                        what: format!("input paths.{what} = {}", path.display()),
                        stage: "synth (or your own data)",
                    });
                }
            }
        }
        if stage == Stage::Summarize && self.config.summarizer.client == ClientKind::Mock {
            match &self.config.summarizer.mock_script {
                Some(p) if p.exists() => {}
                other => {
                    return Err(Error::Config(format!(
                        "summarizer.client is mock but summarizer.mock_script {other:?} does not exist"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Runs `stages` in dependency order after checking every prerequisite
    /// up front, so a long run cannot fail late on a missing input.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<StageReport>> {
        let mut order = stages.to_vec();
        order.sort();
        order.dedup();
        for (i, &s) in order.iter().enumerate() {
            self.require(s, &order[..i])?;
        }
        order.into_iter().map(|s| self.run_stage(s)).collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        self.require(stage, &[])?;
        let t0 = Instant::now();
        log::info!("[{}] stage {stage} starting", self.config.run_id);
        let (artifacts, details) = match stage {
            Stage::Corpus => self.stage_corpus()?,
            Stage::Summarize => self.stage_summarize()?,
            Stage::Vae => self.stage_vae()?,
            Stage::TrainLdm => self.stage_train_ldm()?,
            Stage::Sample => self.stage_sample()?,
            Stage::Fid => self.stage_fid()?,
        };
        let mut hashed = BTreeMap::new();
        for a in artifacts {
            hashed.insert(self.relative(&a), sha(&a)?);
        }
        let report = StageReport {
            stage,
            run_id: self.config.run_id.clone(),
            wall_s: t0.elapsed().as_secs_f64(),
            artifacts: hashed,
            details,
        };
        json_write(&self.layout.stage_report(stage), &report)?;
        log::info!("[{}] stage {stage} done in {:.1}s", self.config.run_id, report.wall_s);
        Ok(report)
    }

    fn stage_corpus(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let c = &self.config;
        let reports = corpus::read_reports(&c.paths.reports)?;
        let scores = corpus::read_scores(&c.paths.scores)?;
        let manifest_path = self.layout.manifest();
        let dir = manifest_path.parent().expect("nested path").to_path_buf();
        let mut manifest = corpus::build_manifest(&c.paths.image_dir, &reports, &scores, &dir, c.corpus.patch_size)?;
        let splits = corpus::assign_splits(
            &mut manifest,
            &SplitSpec {
                seed: crate::rng::derive_seed(c.seed, "split", 0),
                test_fraction: c.corpus.test_fraction,
                grouping: c.corpus.grouping,
            },
        )?;
        manifest.write(&manifest_path)?;
        splits.write(&self.layout.splits())?;
        let n_test = manifest.split(Split::Test).count();
        Ok((
            vec![manifest_path, self.layout.splits()],
            serde_json::json!({ "patches": manifest.len(), "test": n_test, "train": manifest.len() - n_test }),
        ))
    }

    fn client(&self) -> Result<Box<dyn CompletionClient>> {
        let s = &self.config.summarizer;
        Ok(match s.client {
            ClientKind::Mock => Box::new(MockClient::from_file(
                s.mock_script.as_deref().expect("checked in require"),
            )?),
            ClientKind::Http => Box::new(HttpClient::new(
                &s.base_url,
                &s.model,
                std::env::var(&s.api_key_env).ok(),
                Duration::from_secs(s.timeout_s),
            )),
        })
    }

    fn stage_summarize(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let s = &self.config.summarizer;
        let mut manifest = Manifest::read(&self.layout.manifest())?;
        let client = self.client()?;
        let cache = SummaryCache::open(&self.layout.summary_cache())?;
        let conditioner = self.config.textcond.build()?;
        let mut options = CorpusOptions::new(s.budget);
        options.max_retries = s.max_retries;
        options.workers = s.workers;
        options.min_interval = Duration::from_millis(s.min_interval_ms);
        options.truncate = s.truncate;
        options.caption_capacity = Some(conditioner.context_len());
        if let Some(dir) = &s.prompts_dir {
            options.prompt_chain = PromptChain::load_dir(dir)?;
        }
        let report = summarizer::summarize_corpus(&mut manifest, client.as_ref(), &cache, &options)?;
        manifest.write(&self.layout.captioned_manifest())?;
        json_write(&self.layout.summary_report(), &report)?;
        let captioned = manifest.records.iter().filter(|r| r.caption.is_some()).count();
        Ok((
            vec![self.layout.captioned_manifest(), self.layout.summary_report()],
            serde_json::json!({
                "budget": s.budget,
                "cases": report.results.len(),
                "failed_cases": report.failures.len(),
                "cache_hits": report.cache_hits(),
                "captioned_patches": captioned,
            }),
        ))
    }

    fn images(&self, manifest: &Manifest, records: &[&PatchRecord]) -> Result<Tensor> {
        let paths: Vec<PathBuf> = records.iter().map(|r| manifest.image_path(r)).collect();
        crate::imageio::load_batch(&paths)
    }

    fn stage_vae(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let manifest = Manifest::read(&self.layout.manifest())?;
        let train: Vec<&PatchRecord> = manifest.split(Split::Train).collect();
        let test: Vec<&PatchRecord> = manifest.split(Split::Test).take(64).collect();
        let images = self.images(&manifest, &train)?;
        let mut ae = Autoencoder::new(self.config.autoencoder.clone(), DType::F32)?;
        let mut log = MetricsLog::open(&self.layout.vae_metrics(), false)?;
        let report = train_autoencoder(&mut ae, &images, &self.config.vae_train, Some(&mut log))?;
        let scale = compute_scale_factor(&ae, &images, 64)?;
        ae.set_scale_factor(scale);
        ae.save(&self.layout.vae_checkpoint())?;
        let held_out_psnr = if test.is_empty() {
            None
        } else {
            let x = self.images(&manifest, &test)?;
            let post = ae.encode(&x)?;
            Some(psnr(&ae.decode(&post.mean)?, &x)?)
        };
        let tail = smoothed(&report.losses, LOSS_SMOOTHING);
        Ok((
            vec![self.layout.vae_checkpoint(), self.layout.vae_metrics()],
            serde_json::json!({
                "steps": report.losses.len(),
                "final_smoothed_loss": tail.last(),
                "scale_factor": scale,
                "held_out_psnr_db": held_out_psnr,
            }),
        ))
    }

    /// Captioned records of one split, in manifest order.
    fn captioned(manifest: &Manifest, split: Split) -> Vec<&PatchRecord> {
        manifest.split(split).filter(|r| r.caption.is_some()).collect()
    }

    fn stage_train_ldm(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let c = &self.config;
        let manifest = Manifest::read(&self.layout.captioned_manifest())?;
        let records = Self::captioned(&manifest, Split::Train);
        if records.is_empty() {
            return Err(Error::InvalidArgument("no captioned training patches".into()));
        }
        let vae = Autoencoder::load(&self.layout.vae_checkpoint())?;
        let mut latents = Vec::new();
        for chunk in records.chunks(64) {
            latents.push(vae.encode_latents(&self.images(&manifest, chunk)?)?.tensor);
        }
        let latents = Tensor::cat(&latents, 0)?;
        let captions: Vec<String> = records.iter().map(|r| r.caption.clone().expect("filtered")).collect();
        let conditioner = c.textcond.build()?;
        let data = LdmData::new(latents, &captions, &conditioner)?;

        let ckpt = self.layout.ldm_checkpoint();
        let mut trainer = if ckpt.exists() {
            let t = LdmTrainer::load(&ckpt, Some(c.ldm_train.clone()))?;
            check_resume_compatible(&t, c)?;
            log::info!("resuming LDM training from step {}", t.step());
            t
        } else {
            LdmTrainer::new(UNet::new(c.unet.clone(), DType::F32)?, c.schedule.clone(), c.ldm_train.clone())?
        };
        let fresh = trainer.step() == 0;
        let mut log = MetricsLog::open(&self.layout.ldm_metrics(), !fresh)?;
        trainer.train(&data, Some(&mut log), Some(&self.layout.ldm_dir()))?;
        if !ckpt.exists() {
            trainer.save(&ckpt)?;
        }
        let metrics = read_metrics(&self.layout.ldm_metrics())?;
        let losses: Vec<f64> = metrics.iter().map(|m| m.loss).collect();
        let details = LdmStageDetails {
            steps: trainer.step(),
            initial_loss: losses.first().copied().unwrap_or(f64::NAN),
            final_smoothed_loss: smoothed(&losses, LOSS_SMOOTHING).last().copied().unwrap_or(f64::NAN),
            peak_mem_bytes: metrics.iter().map(|m| m.peak_mem_bytes).max().unwrap_or(0),
            context_len: c.unet.context_len,
        };
        Ok((vec![ckpt, self.layout.ldm_metrics()], serde_json::to_value(details)?))
    }

    fn stage_sample(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let c = &self.config;
        let manifest = Manifest::read(&self.layout.captioned_manifest())?;
        let held_out = Self::captioned(&manifest, Split::Test);
        if held_out.is_empty() {
            return Err(Error::InvalidArgument("no captioned held-out patches to sample from".into()));
        }
        let captions: Vec<String> = (0..c.generation.n_samples)
            .map(|i| held_out[i % held_out.len()].caption.clone().expect("filtered"))
            .collect();
        let (unet, schedule) = load_model(&self.layout.ldm_checkpoint())?;
        let vae = Autoencoder::load(&self.layout.vae_checkpoint())?;
        let conditioner = c.textcond.build()?;
        let generator = Generator {
            unet: &unet,
            schedule: &schedule,
            vae: &vae,
            conditioner: &conditioner,
            checkpoint_hashes: checkpoint_hashes(&[self.layout.ldm_checkpoint(), self.layout.vae_checkpoint()])?,
        };
        let out = self.layout.samples_dir();
        if out.exists() {
            std::fs::remove_dir_all(&out).at(&out)?;
        }
        let records = generator.generate(&captions, &c.sampler, &out)?;
        let mut artifacts: Vec<PathBuf> = records.iter().map(|r| out.join(&r.file)).collect();
        artifacts.push(out.join("manifest.jsonl"));
        Ok((
            artifacts,
            serde_json::json!({ "images": records.len(), "sampler": c.sampler }),
        ))
    }

    fn extractor(&self) -> Result<Box<dyn FeatureExtractor>> {
        fidelity::extractor_by_name(&self.config.fid.extractor, self.config.fid.extractor_seed)
    }

    /// Held-out image statistics, cached next to the FID report.
    pub fn real_stats(&self, extractor: &dyn FeatureExtractor) -> Result<PathBuf> {
        let path = self.layout.real_stats();
        if path.exists() {
            if let Ok(f) = StatsFile::read(&path) {
                if f.extractor_id == extractor.id() {
                    return Ok(path);
                }
            }
        }
        let manifest = Manifest::read(&self.layout.manifest())?;
        let paths: Vec<PathBuf> = manifest.split(Split::Test).map(|r| manifest.image_path(r)).collect();
        let stats = fidelity::stats_for_paths(&paths, extractor, self.config.fid.batch_size)?;
        std::fs::create_dir_all(path.parent().expect("nested")).at(&path)?;
        StatsFile {
            extractor_id: extractor.id(),
            stats,
        }
        .write(&path)?;
        Ok(path)
    }

    fn stage_fid(&self) -> Result<(Vec<PathBuf>, serde_json::Value)> {
        let extractor = self.extractor()?;
        let real = RealSource::Stats(self.real_stats(extractor.as_ref())?);
        let generated = fidelity::score(&real, &self.layout.samples_dir(), extractor.as_ref(), &self.config.fid)?;
        let n = generated.n_fake as usize;
        let noise_dir = self.layout.noise_dir();
        write_noise_images(&noise_dir, n, self.config.autoencoder.image_size, self.config.seed)?;
        let noise_baseline = fidelity::score(&real, &noise_dir, extractor.as_ref(), &self.config.fid)?;
        // record locations relative to the run so reruns elsewhere compare equal
        let rel = |r: FidReport| FidReport {
            real: self.relative(Path::new(&r.real)),
            fake: self.relative(Path::new(&r.fake)),
            ..r
        };
        let report = FidStageReport {
            generated: rel(generated),
            noise_baseline: rel(noise_baseline),
        };
        json_write(&self.layout.fid_report(), &report)?;
        Ok((
            vec![self.layout.fid_report(), self.layout.real_stats()],
            serde_json::json!({
                "fid": report.generated.fid,
                "noise_baseline_fid": report.noise_baseline.fid,
                "n_fake": report.generated.n_fake,
                "n_real": report.generated.n_real,
            }),
        ))
    }
}

/// A resumed run must train the same model on the same objective; only
/// the stopping point and logging cadence may change.
fn check_resume_compatible(trainer: &LdmTrainer, c: &PipelineConfig) -> Result<()> {
    if trainer.unet().config() != &c.unet {
        return Err(Error::Config("ldm checkpoint was trained with a different unet config".into()));
    }
    let strip = |t: &LdmTrainConfig| LdmTrainConfig {
        max_iterations: 0,
        checkpoint_every: 0,
        log_every: 0,
        ..t.clone()
    };
    let stored = trainer.config();
    if strip(stored) != strip(&c.ldm_train) {
        return Err(Error::Config("ldm checkpoint was trained with a different ldm_train config".into()));
    }
    Ok(())
}

/// `n` images of uniform pixel noise: the FID reference point a trained
/// generator must beat.
pub fn write_noise_images(dir: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let mut rng = crate::rng::stream(seed, "noise-images", 0);
    for i in 0..n {
        let v: Vec<f32> = (0..3 * size * size).map(|_| rng.random_range(-1f32..=1f32)).collect();
        let t = Tensor::from_vec(v, (3, size, size), &Device::Cpu)?;
        crate::imageio::save_rgb(&t, &dir.join(format!("{i:06}.png")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub token_budget: usize,
    pub n_windows: usize,
    pub context_len: usize,
    pub fid: Option<f64>,
    pub peak_mem_bytes: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| token length | context | FID | peak memory (MiB) |\n|---|---|---|---|\n");
        for r in &self.rows {
            let fid = r.fid.map_or_else(|| "—".into(), |f| format!("{f:.3}"));
            let mem = r
                .peak_mem_bytes
                .map_or_else(|| "—".into(), |m| format!("{:.1}", m as f64 / (1 << 20) as f64));
            let note = r.error.as_ref().map(|e| format!(" (failed: {e})")).unwrap_or_default();
            s += &format!("| {} | {} | {fid} | {mem}{note} |\n", r.token_budget, r.context_len);
        }
        s
    }
}

/// Context windows a caption needs at `budget`: summary plus score clauses.
pub fn windows_for_budget(budget: usize) -> usize {
    let tok = crate::textcond::Tokenizer::bundled();
    (budget + summarizer::clause_tokens(&tok)).div_ceil(crate::textcond::WINDOW_LEN).clamp(1, 2)
}

/// Trains, samples and scores one model per token budget on a shared corpus
/// and autoencoder (both produced once under `base.paths.run_dir`). A failing
/// budget is recorded in its row and the others still run.
pub fn token_length_study(base: &PipelineConfig, budgets: &[usize]) -> Result<StudyReport> {
    if budgets.is_empty() {
        return Err(Error::InvalidArgument("no budgets given".into()));
    }
    let root = Pipeline::new(base.clone())?;
    root.run(&[Stage::Corpus, Stage::Vae])?;
    let mut rows = Vec::new();
    for &budget in budgets {
        let n_windows = windows_for_budget(budget);
        let mut row = StudyRow {
            token_budget: budget,
            n_windows,
            context_len: n_windows * crate::textcond::WINDOW_LEN,
            fid: None,
            peak_mem_bytes: None,
            error: None,
        };
        match study_one(&root, budget, n_windows) {
            Ok((fid, mem)) => {
                row.fid = Some(fid);
                row.peak_mem_bytes = Some(mem);
            }
            Err(e) => {
                log::error!("budget {budget}: {e}");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
        let report = StudyReport { rows: rows.clone() };
        json_write(&root.layout.root.join("study/report.json"), &report)?;
        crate::checkpoint::write_atomic(&root.layout.root.join("study/report.md"), report.to_markdown().as_bytes())?;
    }
    Ok(StudyReport { rows })
}

fn study_one(root: &Pipeline, budget: usize, n_windows: usize) -> Result<(f64, u64)> {
    let mut cfg = root.config.clone();
    cfg.run_id = format!("{}-budget-{budget}", cfg.run_id);
    cfg.paths.run_dir = root.layout.root.join(format!("study/budget-{budget}"));
    cfg.summarizer.budget = budget;
    cfg.textcond.n_windows = n_windows;
    cfg.unet.context_len = n_windows * crate::textcond::WINDOW_LEN;
    let p = Pipeline::new(cfg)?;
    // share the corpus and autoencoder; the manifest is re-based on write
    Manifest::read(&root.layout.manifest())?.write(&p.layout.manifest())?;
    std::fs::copy(root.layout.splits(), p.layout.splits()).at(p.layout.splits())?;
    let vae = p.layout.vae_checkpoint();
    std::fs::create_dir_all(vae.parent().expect("nested")).at(&vae)?;
    std::fs::copy(root.layout.vae_checkpoint(), &vae).at(&vae)?;
    let reports = p.run(&[Stage::Summarize, Stage::TrainLdm, Stage::Sample, Stage::Fid])?;
    let ldm: LdmStageDetails = serde_json::from_value(reports[1].details.clone())?;
    let fid: FidStageReport = json_read(&p.layout.fid_report())?;
    Ok((fid.generated.fid, ldm.peak_mem_bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip_and_graph_is_acyclic() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
            // every dependency comes strictly earlier in the canonical order
            assert!(s.requires().iter().all(|d| *d < s));
        }
        assert!(Stage::parse("train").is_err());
    }

    #[test]
    fn missing_prerequisite_names_the_producer() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.paths.run_dir = dir.path().join("run");
        let p = Pipeline::new(cfg).unwrap();
        match p.run(&[Stage::Sample]) {
            Err(Error::MissingPrerequisite { stage, .. }) => assert_eq!(stage, "summarize"),
            other => panic!("{other:?}"),
        }
        // summarize and vae planned in the same run: next gap is train-ldm
        std::fs::create_dir_all(dir.path().join("run/summaries")).unwrap();
        std::fs::write(p.layout().captioned_manifest(), "").unwrap();
        std::fs::create_dir_all(dir.path().join("run/vae")).unwrap();
        std::fs::write(p.layout().vae_checkpoint(), "").unwrap();
        match p.run_stage(Stage::Sample) {
            Err(Error::MissingPrerequisite { stage, .. }) => assert_eq!(stage, "train-ldm"),
            other => panic!("{other:?}"),
        }
        assert!(p.layout().config_snapshot().exists());
    }

    #[test]
    fn budgets_map_to_windows() {
        assert_eq!(windows_for_budget(20), 1);
        assert_eq!(windows_for_budget(50), 1);
        assert_eq!(windows_for_budget(150), 2);
    }
}
