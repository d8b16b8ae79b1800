//! `histogen`: one subcommand per pipeline stage, plus the token-length
//! study and a `pipeline run` driver.
//!
//! Configuration precedence: stage flags > `--set` > `HISTOGEN__section__field`
//! environment variables > `--config` file > built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use histogen::autoencoder::{psnr, Autoencoder};
use histogen::config::{ClientKind, PipelineConfig};
use histogen::corpus::{assign_splits, Grouping, Manifest, SplitSpec};
use histogen::diffusion::{load_model, PrecisionPolicy};
use histogen::fidelity::{self, RealSource};
use histogen::pipeline::{token_length_study, Pipeline, Stage, StageReport};
use histogen::sampler::{checkpoint_hashes, read_captions, Generator};
use histogen::synth::{self, SynthConfig};

#[global_allocator]
static ALLOC: histogen::memory::TrackingAllocator = histogen::memory::TrackingAllocator;

#[derive(Parser, Debug)]
#[command(name = "histogen", version, about = "Text-conditioned latent diffusion for histopathology patches")]
struct Cli {
    /// YAML config file (a run's config.yaml snapshot works too).
    #[arg(long, global = true, env = "HISTOGEN_CONFIG")]
    config: Option<PathBuf>,

    /// Config override `section.field=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic two-class textured patch corpus with reports,
    /// scores and a mock-summarizer script.
    Synth(SynthArgs),
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Caption every case at a token budget.
    Summarize(SummarizeArgs),
    #[command(subcommand)]
    Vae(VaeCommand),
    /// Train the latent diffusion model (resumes from ldm-last if present).
    TrainLdm(TrainLdmArgs),
    /// Generate one image per caption.
    Sample(SampleArgs),
    /// Fréchet distance between a real and a generated image set.
    Fid(FidArgs),
    /// Train, sample and score one model per token budget.
    Study(StudyArgs),
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Print the fully resolved configuration.
    Config,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 20)]
    patches: usize,
    #[arg(long, default_value_t = 32)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum CorpusCommand {
    /// Build the manifest from patch images, reports and scores, and split it.
    Build,
    /// Re-split an existing manifest.
    Split {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long, value_enum)]
        group_by: Option<GroupBy>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GroupBy {
    Case,
    Patch,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_retries: Option<usize>,
    /// Scripted responses (JSON: case_id → [responses]); selects the mock client.
    #[arg(long)]
    mock: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum VaeCommand {
    /// Train the autoencoder on the train split.
    Train,
    /// Encode and decode images with a trained checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG or a directory of PNGs.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Precision {
    Full32,
    Mixed16,
}

#[derive(Args, Debug)]
struct TrainLdmArgs {
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// One caption per line.
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// LDM checkpoint; defaults to the run directory's ldm-last.
    #[arg(long)]
    ldm: Option<PathBuf>,
    /// Autoencoder checkpoint; defaults to the run directory's.
    #[arg(long)]
    vae: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FidArgs {
    /// Directory of real images, or a saved statistics file.
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
enum PipelineCommand {
    /// Run stages in dependency order; all of them by default.
    Run {
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    PipelineConfig::load(cli.config.as_deref(), &cli.overrides).context("loading configuration")
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_stages(cfg: PipelineConfig, stages: &[Stage]) -> Result<()> {
    let p = Pipeline::new(cfg)?;
    let reports: Vec<StageReport> = p.run(stages)?;
    print_json(&reports)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let ds = synth::generate(
                &a.out,
                &SynthConfig {
                    n_cases: a.cases,
                    patches_per_case: a.patches,
                    image_size: a.size,
                    seed: a.seed,
                    ..Default::default()
                },
            )?;
            print_json(&serde_json::json!({
                "image_dir": ds.image_dir,
                "reports": ds.reports_csv,
                "scores": ds.scores_csv,
                "mock_script": ds.mock_script,
            }))
        }
        Command::Corpus(CorpusCommand::Build) => run_stages(load_config(&cli)?, &[Stage::Corpus]),
        Command::Corpus(CorpusCommand::Split {
            seed,
            test_fraction,
            group_by,
        }) => {
            let mut cfg = load_config(&cli)?;
            if let Some(f) = test_fraction {
                cfg.corpus.test_fraction = *f;
            }
            if let Some(g) = group_by {
                cfg.corpus.grouping = match g {
                    GroupBy::Case => Grouping::ByCase,
                    GroupBy::Patch => Grouping::ByPatch,
                };
            }
            let p = Pipeline::new(cfg)?;
            let path = p.layout().manifest();
            let mut manifest = Manifest::read(&path).with_context(|| {
                format!("no manifest at {}; run `histogen corpus build` first", path.display())
            })?;
            let c = p.config();
            let spec = SplitSpec {
                seed: seed.unwrap_or_else(|| histogen::rng::derive_seed(c.seed, "split", 0)),
                test_fraction: c.corpus.test_fraction,
                grouping: c.corpus.grouping,
            };
            let splits = assign_splits(&mut manifest, &spec)?;
            manifest.write(&path)?;
            splits.write(&p.layout().splits())?;
            let test = manifest.split(histogen::corpus::Split::Test).count();
            print_json(&serde_json::json!({ "patches": manifest.len(), "test": test, "spec": spec }))
        }
        Command::Summarize(a) => {
            let mut cfg = load_config(&cli)?;
            let s = &mut cfg.summarizer;
            if let Some(b) = a.budget {
                s.budget = b;
            }
            if let Some(m) = &a.model {
                s.model = m.clone();
            }
            if let Some(k) = a.max_retries {
                s.max_retries = k;
            }
            if let Some(script) = &a.mock {
                s.client = ClientKind::Mock;
                s.mock_script = Some(script.clone());
            }
            run_stages(cfg, &[Stage::Summarize])
        }
        Command::Vae(VaeCommand::Train) => run_stages(load_config(&cli)?, &[Stage::Vae]),
        Command::Vae(VaeCommand::Reconstruct { checkpoint, input, out }) => reconstruct(checkpoint, input, out),
        Command::TrainLdm(a) => {
            let mut cfg = load_config(&cli)?;
            if let Some(n) = a.steps {
                cfg.ldm_train.max_iterations = n;
            }
            if let Some(p) = a.precision {
                cfg.ldm_train.precision = match p {
                    Precision::Full32 => PrecisionPolicy::full32(),
                    Precision::Mixed16 => PrecisionPolicy::mixed16(),
                };
            }
            run_stages(cfg, &[Stage::TrainLdm])
        }
        Command::Sample(a) => sample(load_config(&cli)?, a),
        Command::Fid(a) => {
            let cfg = load_config(&cli)?.resolve()?;
            let mut fid = cfg.fid.clone();
            if let Some(e) = &a.extractor {
                fid.extractor = e.clone();
            }
            let extractor = fidelity::extractor_by_name(&fid.extractor, fid.extractor_seed)?;
            let report = fidelity::score(&RealSource::from_path(&a.real), &a.fake, extractor.as_ref(), &fid)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&a.out, serde_json::to_vec_pretty(&report)?)
                .with_context(|| format!("writing {}", a.out.display()))?;
            print_json(&report)
        }
        Command::Study(a) => {
            let cfg = load_config(&cli)?;
            let budgets = a.budgets.clone().unwrap_or_else(|| cfg.study.budgets.clone());
            let report = token_length_study(&cfg, &budgets)?;
            println!("{}", report.to_markdown());
            if report.rows.iter().any(|r| r.error.is_some()) {
                bail!("some budgets failed; see the report");
            }
            Ok(())
        }
        Command::Pipeline(PipelineCommand::Run { stages }) => {
            let stages = match stages {
                Some(names) => names.iter().map(|n| Stage::parse(n.trim())).collect::<histogen::Result<Vec<_>>>()?,
                None => Stage::ALL.to_vec(),
            };
            run_stages(load_config(&cli)?, &stages)
        }
        Command::Config => {
            print!("{}", load_config(&cli)?.resolve()?.to_yaml()?);
            Ok(())
        }
    }
}

fn sample(cfg: PipelineConfig, a: &SampleArgs) -> Result<()> {
    let cfg = cfg.resolve()?;
    let run = histogen::pipeline::RunLayout::new(&cfg.paths.run_dir);
    let ldm_path = a.ldm.clone().unwrap_or_else(|| run.ldm_checkpoint());
    let vae_path = a.vae.clone().unwrap_or_else(|| run.vae_checkpoint());
    for (path, stage) in [(&ldm_path, "train-ldm"), (&vae_path, "vae")] {
        if !path.exists() {
            bail!("missing checkpoint {}; produce it with `histogen {stage}`", path.display());
        }
    }
    let mut sampler = cfg.sampler.clone();
    if let Some(n) = a.steps {
        sampler.n_steps = n;
    }
    if let Some(s) = a.scale {
        sampler.guidance_scale = s;
    }
    if let Some(e) = a.eta {
        sampler.eta = e;
    }
    if let Some(s) = a.seed {
        sampler.seed = s;
    }
    let (unet, schedule) = load_model(&ldm_path)?;
    let vae = Autoencoder::load(&vae_path)?;
    let conditioner = cfg.textcond.build()?;
    let generator = Generator {
        unet: &unet,
        schedule: &schedule,
        vae: &vae,
        conditioner: &conditioner,
        checkpoint_hashes: checkpoint_hashes(&[ldm_path.clone(), vae_path.clone()])?,
    };
    let captions = read_captions(&a.captions)?;
    if captions.is_empty() {
        bail!("{} contains no captions", a.captions.display());
    }
    let records = generator.generate(&captions, &sampler, &a.out)?;
    println!("wrote {} images and manifest.jsonl to {}", records.len(), a.out.display());
    Ok(())
}

fn reconstruct(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let ae = Autoencoder::load(checkpoint)?;
    let paths = if input.is_dir() {
        histogen::imageio::list_pngs(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if paths.is_empty() {
        bail!("no PNG images in {}", input.display());
    }
    std::fs::create_dir_all(out)?;
    let mut total = 0.0;
    for chunk in paths.chunks(16) {
        let x = histogen::imageio::load_batch(chunk)?;
        let post = ae.encode(&x)?;
        let y = ae.decode(&post.mean)?.clamp(-1f32, 1f32)?;
        total += psnr(&y, &x)? * chunk.len() as f64;
        for (i, p) in chunk.iter().enumerate() {
            let name = p.file_name().context("image path without a file name")?;
            histogen::imageio::save_rgb(&y.get(i)?, &out.join(name))?;
        }
    }
    println!(
        "reconstructed {} image(s) into {}, mean PSNR {:.2} dB",
        paths.len(),
        out.display(),
        total / paths.len() as f64
    );
    Ok(())
}
