//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/exp1"
//! plan = "cv-fold"                 # cross-database | cv-fold | personal
//! init = "finetune:models/pre.ckpt" # scratch | finetune:<ckpt> | personalize:<ckpt>
//! noise_manifest = "noise.jsonl"
//! train_corpus = "pcgita"
//!
//! [corpora]
//! pcgita = "pcgita.jsonl"
//!
//! [train]
//! max_epochs = 200
//!
//! [mcem]
//! n_em_iters = 100
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vaenmf::corpus::{Manifest, NoiseManifest};
use vaenmf::dsp::StftConfig;
use vaenmf::mcem::McemConfig;
use vaenmf::vae::TrainConfig;

use crate::error::{validation, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    CrossDatabase,
    #[default]
    CvFold,
    Personal,
}

/// Where model weights start from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Deserialize)]
#[serde(try_from = "String")]
pub enum InitMode {
    #[default]
    Scratch,
    Finetune(PathBuf),
    Personalize(PathBuf),
}

impl InitMode {
    pub fn checkpoint(&self) -> Option<&Path> {
        match self {
            InitMode::Scratch => None,
            InitMode::Finetune(p) | InitMode::Personalize(p) => Some(p),
        }
    }

    fn map_path(self, f: impl Fn(PathBuf) -> PathBuf) -> Self {
        match self {
            InitMode::Scratch => InitMode::Scratch,
            InitMode::Finetune(p) => InitMode::Finetune(f(p)),
            InitMode::Personalize(p) => InitMode::Personalize(f(p)),
        }
    }
}

impl TryFrom<String> for InitMode {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "scratch" {
            return Ok(InitMode::Scratch);
        }
        let path = |p: &str| {
            if p.is_empty() {
                Err(format!("init mode {s:?} needs a checkpoint path"))
            } else {
                Ok(PathBuf::from(p))
            }
        };
        if let Some(p) = s.strip_prefix("finetune:") {
            return path(p).map(InitMode::Finetune);
        }
        if let Some(p) = s.strip_prefix("personalize:") {
            return path(p).map(InitMode::Personalize);
        }
        Err(format!(
            "init mode {s:?}; expected scratch, finetune:<ckpt> or personalize:<ckpt>"
        ))
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitMode::Scratch => f.write_str("scratch"),
            InitMode::Finetune(p) => write!(f, "finetune:{}", p.display()),
            InitMode::Personalize(p) => write!(f, "personalize:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    /// Folds for the cv-fold protocol.
    pub k: usize,
    /// Speaker share used for validation (and for testing in the
    /// cross-database protocol).
    pub val_fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            k: 10,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Named clean-speech manifests.
    #[serde(default)]
    pub corpora: BTreeMap<String, PathBuf>,
    /// Corpus used for training; defaults to the only corpus.
    pub train_corpus: Option<String>,
    /// Corpus used by `evaluate`; defaults to the only corpus.
    pub test_corpus: Option<String>,
    pub noise_manifest: Option<PathBuf>,
    /// Pre-computed mixture list; generated from the seed when absent.
    pub mixture_list: Option<PathBuf>,
    #[serde(default)]
    pub plan: PlanKind,
    #[serde(default)]
    pub init: InitMode,
    /// Model used by `enhance` and `evaluate`.
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mcem: McemConfig,
    #[serde(default)]
    pub split: SplitSettings,
    /// External PESQ command with `{ref}` and `{est}` placeholders.
    pub pesq_command: Option<String>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_jobs() -> usize {
    1
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub init: Option<InitMode>,
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(validation)?;
        let abs = |p: PathBuf| if p.is_relative() { base_dir.join(p) } else { p };
        cfg.output_dir = abs(cfg.output_dir);
        cfg.corpora = cfg.corpora.into_iter().map(|(k, v)| (k, abs(v))).collect();
        cfg.noise_manifest = cfg.noise_manifest.map(abs);
        cfg.mixture_list = cfg.mixture_list.map(abs);
        cfg.checkpoint = cfg.checkpoint.map(abs);
        cfg.init = cfg.init.map_path(abs);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn apply(mut self, o: Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = o.output_dir {
            self.output_dir = dir;
        }
        if let Some(jobs) = o.jobs {
            self.jobs = jobs;
        }
        if let Some(init) = o.init {
            self.init = init;
        }
        if let Some(ckpt) = o.checkpoint {
            self.checkpoint = Some(ckpt);
        }
        self
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        self.stft.validate().map_err(validation)?;
        self.train.validate().map_err(validation)?;
        self.mcem.validate().map_err(validation)?;
        if self.jobs == 0 {
            return Err(validation("jobs must be at least 1"));
        }
        if self.split.k < 2 {
            return Err(validation("split.k must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.split.val_fraction) {
            return Err(validation("split.val_fraction must lie in [0, 1)"));
        }
        let mut files: Vec<(&str, &Path)> = self.corpora.iter().map(|(k, v)| (k.as_str(), v.as_path())).collect();
        files.extend(self.noise_manifest.as_deref().map(|p| ("noise_manifest", p)));
        files.extend(self.mixture_list.as_deref().map(|p| ("mixture_list", p)));
        files.extend(self.checkpoint.as_deref().map(|p| ("checkpoint", p)));
        files.extend(self.init.checkpoint().map(|p| ("init", p)));
        for (what, path) in files {
            if !path.is_file() {
                return Err(CliError::Validation(format!(
                    "{what}: {} does not exist",
                    path.display()
                )));
            }
        }
        for name in [&self.train_corpus, &self.test_corpus].into_iter().flatten() {
            if !self.corpora.contains_key(name) {
                return Err(CliError::Validation(format!("unknown corpus {name:?}")));
            }
        }
        Ok(())
    }

    fn pick_corpus(&self, named: &Option<String>, role: &str) -> Result<String> {
        match named {
            Some(n) => Ok(n.clone()),
            None if self.corpora.len() == 1 => Ok(self.corpora.keys().next().unwrap().clone()),
            None if self.corpora.is_empty() => Err(validation("no corpora configured")),
            None => Err(CliError::Validation(format!("several corpora configured; set {role}"))),
        }
    }

    pub fn train_corpus_name(&self) -> Result<String> {
        self.pick_corpus(&self.train_corpus, "train_corpus")
    }

    pub fn test_corpus_name(&self) -> Result<String> {
        self.pick_corpus(&self.test_corpus, "test_corpus")
    }

    pub fn load_corpus(&self, name: &str) -> Result<Manifest> {
        let path = self
            .corpora
            .get(name)
            .ok_or_else(|| CliError::Validation(format!("unknown corpus {name:?}")))?;
        Manifest::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn load_noise(&self) -> Result<NoiseManifest> {
        let path = self
            .noise_manifest
            .as_ref()
            .ok_or_else(|| validation("noise_manifest is required"))?;
        let noise = NoiseManifest::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if noise.records().is_empty() {
            return Err(validation("noise manifest has no records"));
        }
        Ok(noise)
    }
}
