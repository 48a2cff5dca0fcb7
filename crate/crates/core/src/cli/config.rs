use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SourceSpec, DEFAULT_PROPORTIONS};
use crate::corpus::Generator;
use crate::error::{Error, Result};
use crate::harness::StudySpec;
use crate::mae::{DecoderConfig, MaeConfig, PretrainConfig};
use crate::policy::{Augmentations, Modality, PolicyConfig, TrainConfig};
use crate::simworld::{Camera, TaskId};
use crate::vit::EncoderConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const SEED_ENV: &str = "MVP_SEED";
/// Default joint-noise level of scripted demonstrations, in radians.
pub const DEFAULT_DEMO_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub total: usize,
    pub proportions: Vec<f64>,
    /// Empty means the built-in desk-scale mixture.
    pub sources: Vec<SourceSpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            total: 5000,
            proportions: DEFAULT_PROPORTIONS.to_vec(),
            sources: Vec::new(),
        }
    }
}

/// Overrides applied on top of the per-task policy defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyOverrides {
    pub hidden_sizes: Option<Vec<usize>>,
    pub embed_dim: Option<usize>,
    pub modality: Modality,
    pub camera: Camera,
    pub augmentations: Augmentations,
    pub finetune_encoder: bool,
    pub train: TrainConfig,
}

impl Default for PolicyOverrides {
    fn default() -> Self {
        PolicyOverrides {
            hidden_sizes: None,
            embed_dim: None,
            modality: Modality::ImageProprio,
            camera: Camera::Wrist,
            augmentations: Augmentations::NONE,
            finetune_encoder: false,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub task: TaskId,
    pub demos: usize,
    pub sigma: f64,
    pub record_third: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            task: TaskId::Reach,
            demos: 80,
            sigma: DEFAULT_DEMO_SIGMA,
            record_third: false,
        }
    }
}

/// Everything that determines a run, saved next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub encoder: EncoderConfig,
    /// Derived from the encoder when absent.
    pub decoder: Option<DecoderConfig>,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub policy: PolicyOverrides,
    pub task: TaskConfig,
    pub study: StudySpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            encoder: EncoderConfig::tiny(),
            decoder: None,
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            policy: PolicyOverrides::default(),
            task: TaskConfig::default(),
            study: StudySpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies the `MVP_SEED` override, if set, to the run and pre-training seeds.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mae().decoder.validate(&self.encoder)?;
        self.study.validate()?;
        if self.corpus.total == 0 {
            return Err(Error::Config("corpus.total must be positive".into()));
        }
        if !(self.task.sigma >= 0.0) {
            return Err(Error::Config("task.sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn mae(&self) -> MaeConfig {
        MaeConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone().unwrap_or_else(|| DecoderConfig::light(&self.encoder)),
        }
    }

    pub fn corpus_sources(&self) -> Vec<SourceSpec> {
        if !self.corpus.sources.is_empty() {
            return self.corpus.sources.clone();
        }
        vec![
            SourceSpec::synthetic("egocentric-sim", Generator::SimRenders, self.seed),
            SourceSpec::synthetic("still-shapes", Generator::Shapes, self.seed.wrapping_add(1)),
            SourceSpec::synthetic("interaction-sim", Generator::SimRenders, self.seed.wrapping_add(2)),
        ]
    }

    /// Policy recipe for `task` on features of width `feature_dim`.
    pub fn policy_config(&self, task: TaskId, feature_dim: usize) -> PolicyConfig {
        let mut c = PolicyConfig::for_task(task, feature_dim);
        let o = &self.policy;
        if let Some(h) = &o.hidden_sizes {
            c.hidden_sizes = h.clone();
        }
        if let Some(e) = o.embed_dim {
            c.embed_dim = e;
        }
        c.modality = o.modality;
        c.camera = o.camera;
        c.augmentations = o.augmentations;
        c.finetune_encoder = o.finetune_encoder;
        c.train = o.train;
        c
    }

    /// Writes this config into `dir` as `run_config.toml`.
    pub fn save_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))
    }
}
