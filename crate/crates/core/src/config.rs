//! Pipeline configuration: one YAML document with a section per module.
//!
//! Values are layered, later layers winning:
//! built-in defaults < config file < `HISTOGEN__section__field` environment
//! variables < explicit `section.field=value` overrides (command-line flags).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::autoencoder::{AeTrainConfig, AutoencoderConfig};
use crate::corpus::Grouping;
use crate::diffusion::{LdmTrainConfig, ScheduleConfig, UNetConfig};
use crate::error::{Error, IoContext, Result};
use crate::fidelity::FidConfig;
use crate::sampler::SamplerConfig;
use crate::textcond::TextCondConfig;

pub const ENV_PREFIX: &str = "HISTOGEN__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Every stage writes below this directory.
    pub run_dir: PathBuf,
    /// Patch PNGs, named `<patch_id>.png`, searched recursively.
    pub image_dir: PathBuf,
    /// `case_id,report_text`
    pub reports: PathBuf,
    /// `patch_id,case_id,tumor,til`
    pub scores: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            run_dir: "runs/default".into(),
            image_dir: "data/images".into(),
            reports: "data/reports.csv".into(),
            scores: "data/scores.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub patch_size: u32,
    pub test_fraction: f64,
    pub grouping: Grouping,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            patch_size: 32,
            test_fraction: 0.2,
            grouping: Grouping::ByCase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    /// Replays `mock_script`.
    #[default]
    Mock,
    /// OpenAI-compatible chat completions endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizerSection {
    pub budget: usize,
    pub max_retries: usize,
    pub workers: usize,
    pub min_interval_ms: u64,
    pub truncate: bool,
    pub client: ClientKind,
    pub mock_script: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_s: u64,
    /// Directory of prompt templates; the bundled chain when unset.
    pub prompts_dir: Option<PathBuf>,
}

impl Default for SummarizerSection {
    fn default() -> Self {
        Self {
            budget: 50,
            max_retries: 3,
            workers: 4,
            min_interval_ms: 0,
            truncate: false,
            client: ClientKind::Mock,
            mock_script: Some("data/mock_responses.json".into()),
            base_url: "http://localhost:8000/v1".into(),
            model: crate::summarizer::DEFAULT_MODEL.into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_s: 60,
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    /// Images generated from held-out captions (cycled if there are fewer).
    pub n_samples: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self { n_samples: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub budgets: Vec<usize>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            budgets: vec![20, 35, 50, 150],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_id: String,
    /// Root of all randomness: every section's `seed` is derived from it
    /// (see [`PipelineConfig::resolve`]).
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub summarizer: SummarizerSection,
    pub textcond: TextCondConfig,
    pub autoencoder: AutoencoderConfig,
    pub vae_train: AeTrainConfig,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub ldm_train: LdmTrainConfig,
    pub sampler: SamplerConfig,
    pub generation: GenerationSection,
    pub fid: FidConfig,
    pub study: StudySection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusSection::default(),
            summarizer: SummarizerSection::default(),
            textcond: TextCondConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            vae_train: AeTrainConfig::default(),
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            ldm_train: LdmTrainConfig::default(),
            sampler: SamplerConfig::default(),
            generation: GenerationSection::default(),
            fid: FidConfig::default(),
            study: StudySection::default(),
        }
    }
}

/// Parses a scalar the way YAML would (`true`, `3`, `1e-4`, `[1, 2]`, text).
fn parse_scalar(raw: &str) -> Value {
    serde_yaml::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (already split on the separator) inside a mapping tree.
fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut node = root;
    for key in parents {
        if !node.is_mapping() {
            return Err(Error::Config(format!("override {}: `{key}` is not a section", path.join("."))));
        }
        let map = node.as_mapping_mut().expect("checked mapping");
        node = map
            .entry(Value::String(key.clone()))
            .or_insert_with(|| Value::Mapping(Mapping::new()));
    }
    match node.as_mapping_mut() {
        Some(map) => {
            map.insert(Value::String(last.clone()), value);
            Ok(())
        }
        None => Err(Error::Config(format!("override {} targets a non-section", path.join(".")))),
    }
}

/// Recursively overlays `top` onto `base`; mappings merge, anything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Mapping(b), Value::Mapping(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Builder for the layered configuration.
#[derive(Debug, Clone)]
pub struct ConfigLoader {
    tree: Value,
}

impl Default for ConfigLoader {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigLoader {
    pub fn new() -> Self {
        Self {
            tree: serde_yaml::to_value(PipelineConfig::default()).expect("default config serializes"),
        }
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let value: Value = serde_yaml::from_str(&text)?;
        if !value.is_null() {
            if !value.is_mapping() {
                return Err(Error::Config(format!("{} is not a YAML mapping", path.display())));
            }
            merge(&mut self.tree, value);
        }
        Ok(self)
    }

    /// Applies `HISTOGEN__section__field=value` pairs from `vars`.
    pub fn env_vars<I: IntoIterator<Item = (String, String)>>(mut self, vars: I) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_lowercase(), v)))
            .collect();
        pairs.sort();
        for (k, v) in pairs {
            let path: Vec<String> = k.split("__").map(String::from).collect();
            set_path(&mut self.tree, &path, parse_scalar(&v))?;
        }
        Ok(self)
    }

    pub fn env(self) -> Result<Self> {
        self.env_vars(std::env::vars())
    }

    /// Applies one `section.field=value` override.
    pub fn set(mut self, assignment: &str) -> Result<Self> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let path: Vec<String> = k.trim().split('.').map(String::from).collect();
        set_path(&mut self.tree, &path, parse_scalar(v.trim()))?;
        Ok(self)
    }

    pub fn build(self) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = serde_yaml::from_value(self.tree).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

impl PipelineConfig {
    /// Defaults < `file` < environment < `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut loader = ConfigLoader::new();
        if let Some(f) = file {
            loader = loader.file(f)?;
        }
        loader = loader.env()?;
        for o in overrides {
            loader = loader.set(o)?;
        }
        loader.build()
    }

    /// Derives every section seed from the top-level seed, so no stage draws
    /// entropy from anywhere else, and checks cross-section invariants.
    pub fn resolve(mut self) -> Result<Self> {
        let s = self.seed;
        let d = |name: &str| crate::rng::derive_seed(s, name, 0);
        self.textcond.seed = d("textcond");
        self.autoencoder.seed = d("autoencoder");
        self.vae_train.seed = d("vae_train");
        self.unet.seed = d("unet");
        self.ldm_train.seed = d("ldm_train");
        self.sampler.seed = d("sampler");
        self.fid.extractor_seed = d("fid");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.textcond.validate()?;
        self.autoencoder.validate()?;
        self.unet.validate()?;
        self.ldm_train.validate()?;
        self.sampler.validate(self.schedule.steps)?;
        self.schedule.build()?;
        if self.unet.context_len != self.textcond.context_len() {
            return Err(Error::Config(format!(
                "unet.context_len = {} but textcond.n_windows = {} gives {} context rows",
                self.unet.context_len,
                self.textcond.n_windows,
                self.textcond.context_len()
            )));
        }
        if self.unet.context_dim != self.textcond.d_embed {
            return Err(Error::Config(format!(
                "unet.context_dim = {} but textcond.d_embed = {}",
                self.unet.context_dim, self.textcond.d_embed
            )));
        }
        if self.unet.in_channels != self.autoencoder.z_channels {
            return Err(Error::Config(format!(
                "unet.in_channels = {} but autoencoder.z_channels = {}",
                self.unet.in_channels, self.autoencoder.z_channels
            )));
        }
        if self.autoencoder.image_size != self.corpus.patch_size as usize {
            return Err(Error::Config(format!(
                "autoencoder.image_size = {} but corpus.patch_size = {}",
                self.autoencoder.image_size, self.corpus.patch_size
            )));
        }
        if self.generation.n_samples < 2 {
            return Err(Error::Config("generation.n_samples must be ≥ 2 for FID".into()));
        }
        Ok(())
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}
