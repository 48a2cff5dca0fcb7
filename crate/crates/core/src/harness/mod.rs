//! Experiment orchestration: the sequential per-variation evaluation
//! protocol, baseline comparisons, demo-count sweeps, the model/data scaling
//! study, the ablation suite and result reporting.

mod report;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::mae::{self, DecoderConfig, EncoderCheckpoint, MaeConfig, PretrainConfig};
use crate::policy::{self, Augmentations, BcPolicy, Controller, Demo, Modality, PolicyConfig};
use crate::simworld::{Camera, TaskId, Variation, K};
use crate::vit::EncoderConfig;

pub use report::{mean_stderr, summarize, Curve, CurvePoint, ReferenceRow, Report, SummaryRow, REFERENCE_NOTE, REFERENCE_TASK, TABLE1};

pub const DEFAULT_DEMO_COUNTS: [usize; 4] = [20, 40, 60, 80];
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub task: TaskId,
    pub variation: usize,
    pub success: bool,
    pub steps: usize,
    /// Position in the logical protocol order: `variation * models + rank`.
    pub wall_order: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    /// `(model, successes / k)` in model order.
    pub rates: Vec<(String, f64)>,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k > K {
        return Err(Error::InvalidArgument(format!("variation count {k} outside 1..={K}")));
    }
    Ok(())
}

/// Runs every model on each of the first `k` grid variations of `task`,
/// variation by variation so all models see the same conditions back to back.
pub fn evaluate(models: &mut [Box<dyn Controller>], task: TaskId, k: usize, seed: u64) -> Result<Evaluation> {
    check_k(k)?;
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to evaluate".into()));
    }
    for (i, m) in models.iter().enumerate() {
        if let Some(kind) = m.embodiment() {
            if kind != task.embodiment_kind() {
                return Err(Error::Embodiment {
                    expected: task.embodiment_kind().name().into(),
                    found: format!("{} ({})", kind.name(), m.name()),
                });
            }
        }
        if models[..i].iter().any(|o| o.name() == m.name()) {
            return Err(Error::InvalidArgument(format!("duplicate model name `{}`", m.name())));
        }
    }
    let n = models.len();
    let mut records = Vec::with_capacity(k * n);
    for v in 0..k {
        for (rank, m) in models.iter_mut().enumerate() {
            let t = policy::rollout(m.as_mut(), task, Variation::Grid(v), seed, task.max_steps())?;
            records.push(EvalRecord {
                model: m.name().to_string(),
                task,
                variation: v,
                success: t.success,
                steps: t.steps,
                wall_order: v * n + rank,
                seed,
            });
        }
    }
    let rates = models
        .iter()
        .map(|m| {
            let s = records.iter().filter(|r| r.model == m.name() && r.success).count();
            (m.name().to_string(), s as f64 / k as f64)
        })
        .collect();
    Ok(Evaluation { records, rates })
}

/// Digest of the demo files a study consumes: records and every frame.
pub fn demo_set_hash(demos: &[Demo]) -> String {
    let mut h = Sha256::new();
    for d in demos {
        h.update(serde_json::to_vec(&d.record).unwrap_or_default());
        for img in d.wrist.iter().chain(&d.third) {
            h.update((img.width as u64).to_le_bytes());
            h.update(&img.data);
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Compare,
    DemosSweep,
    Scaling,
    Ablation,
}

impl std::str::FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compare" => Ok(StudyKind::Compare),
            "demos-sweep" => Ok(StudyKind::DemosSweep),
            "scaling" => Ok(StudyKind::Scaling),
            "ablation" => Ok(StudyKind::Ablation),
            _ => Err(Error::InvalidArgument(format!("unknown study kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySpec {
    pub kind: StudyKind,
    /// Encoder checkpoint paths (or tier names for scaling studies).
    pub models: Vec<String>,
    pub tasks: Vec<TaskId>,
    pub demo_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub k: usize,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            kind: StudyKind::Compare,
            models: Vec::new(),
            tasks: vec![TaskId::Reach],
            demo_counts: DEFAULT_DEMO_COUNTS.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            k: K,
        }
    }
}

impl StudySpec {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k)?;
        check_counts(&self.demo_counts)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("a study needs at least one seed".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("a study needs at least one task".into()));
        }
        Ok(())
    }
}

fn check_counts(counts: &[usize]) -> Result<()> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::InvalidArgument(format!("demo counts must be positive, got {counts:?}")));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("demo counts must ascend, got {counts:?}")));
    }
    Ok(())
}

/// One trained-and-evaluated configuration of a study.
#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub encoder: EncoderCheckpoint,
    pub config: PolicyConfig,
    /// Trains on the first `demos` demonstrations.
    pub demos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub kind: StudyKind,
    pub task: TaskId,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    pub demo_hash: String,
    pub records: Vec<EvalRecord>,
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<Curve>,
}

impl StudyResult {
    /// Mean success rate of `arm` over seeds.
    pub fn mean(&self, arm: &str) -> Option<f64> {
        self.summary.iter().find(|r| r.model == arm).map(|r| r.mean)
    }

    pub fn report(&self) -> Report {
        Report::new(self.records.clone(), self.summary.clone(), self.curves.clone())
    }
}

/// Trains every arm once per seed, then evaluates all arms of that seed
/// together with [`evaluate`].
pub fn run_arms(kind: StudyKind, arms: &[Arm], demos: &[Demo], task: TaskId, seeds: &[u64], k: usize) -> Result<StudyResult> {
    check_k(k)?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds".into()));
    }
    if let Some(a) = arms.iter().find(|a| a.demos == 0 || a.demos > demos.len()) {
        return Err(Error::InvalidArgument(format!(
            "arm `{}` wants {} demos, {} available",
            a.name,
            a.demos,
            demos.len()
        )));
    }
    let mut records = Vec::new();
    for &seed in seeds {
        let mut models: Vec<Box<dyn Controller>> = Vec::with_capacity(arms.len());
        for a in arms {
            log::info!("training arm `{}` (seed {seed}, {} demos)", a.name, a.demos);
            let ck = policy::train_bc(&demos[..a.demos], &a.encoder, &a.config, seed)?;
            models.push(Box::new(BcPolicy::new(&a.name, ck, &a.encoder)?));
        }
        let ev = evaluate(&mut models, task, k, seed)?;
        for (name, rate) in &ev.rates {
            log::info!("seed {seed}: {name} {rate:.3}");
        }
        records.extend(ev.records);
    }
    let summary = summarize(&records)?;
    Ok(StudyResult {
        kind,
        task,
        k,
        seeds: seeds.to_vec(),
        arms: arms.iter().map(|a| a.name.clone()).collect(),
        demo_hash: demo_set_hash(demos),
        records,
        summary,
        curves: Vec::new(),
    })
}

/// Same policy recipe on top of different encoders.
pub fn compare(
    encoders: &[(String, EncoderCheckpoint)],
    demos: &[Demo],
    task: TaskId,
    base: &PolicyConfig,
    seeds: &[u64],
    k: usize,
) -> Result<StudyResult> {
    let arms: Vec<Arm> = encoders
        .iter()
        .map(|(name, e)| Arm {
            name: name.clone(),
            encoder: e.clone(),
            config: PolicyConfig {
                feature_dim: e.config.width,
                ..base.clone()
            },
            demos: demos.len(),
        })
        .collect();
    run_arms(StudyKind::Compare, &arms, demos, task, seeds, k)
}

/// Success against the number of training demos; each count trains on a
/// prefix of `demos`.
pub fn demos_sweep(
    encoder: &EncoderCheckpoint,
    demos: &[Demo],
    task: TaskId,
    counts: &[usize],
    base: &PolicyConfig,
    seeds: &[u64],
    k: usize,
) -> Result<StudyResult> {
    check_counts(counts)?;
    let max = *counts.last().unwrap();
    if max > demos.len() {
        return Err(Error::InvalidArgument(format!("sweep needs {max} demos, {} available", demos.len())));
    }
    let arms: Vec<Arm> = counts
        .iter()
        .map(|&n| Arm {
            name: format!("demos-{n}"),
            encoder: encoder.clone(),
            config: PolicyConfig {
                feature_dim: encoder.config.width,
                ..base.clone()
            },
            demos: n,
        })
        .collect();
    let mut res = run_arms(StudyKind::DemosSweep, &arms, &demos[..max], task, seeds, k)?;
    res.curves.push(curve_from(&res, "success_vs_demos", counts.iter().map(|&c| c as f64), &res.arms));
    Ok(res)
}

fn curve_from(res: &StudyResult, name: &str, xs: impl Iterator<Item = f64>, arms: &[String]) -> Curve {
    Curve {
        name: name.to_string(),
        points: xs
            .zip(arms)
            .filter_map(|(x, a)| {
                res.summary.iter().find(|r| &r.model == a).map(|r| CurvePoint {
                    x,
                    mean: r.mean,
                    stderr: r.stderr,
                })
            })
            .collect(),
    }
}

/// True when `rates` never decrease, except for at most one drop of no more
/// than `1 / k`.
pub fn near_monotone(rates: &[f64], k: usize) -> bool {
    let tol = 1.0 / k as f64 + 1e-9;
    let drops: Vec<f64> = rates.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 1e-9).collect();
    drops.is_empty() || (drops.len() == 1 && drops[0] <= tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCell {
    pub tier: String,
    pub corpus_size: usize,
    pub corpus_fingerprint: String,
    pub encoder_fingerprint: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    /// Row-major over `(tier, corpus)`.
    pub cells: Vec<ScalingCell>,
    pub tiers: usize,
    pub corpora: usize,
    /// Largest tier vs smallest tier, both on the largest corpus.
    pub bigger_model_same_data: bool,
    /// Largest tier on the largest corpus vs smallest tier on the smallest.
    pub bigger_model_bigger_data: bool,
    pub study: StudyResult,
}

impl ScalingResult {
    pub fn cell(&self, tier: usize, corpus: usize) -> &ScalingCell {
        &self.cells[tier * self.corpora + corpus]
    }
}

/// MAE-pretrains every `(tier, corpus)` pair, then trains and evaluates a
/// frozen-encoder policy on each. Tiers and corpora are given smallest first.
#[allow(clippy::too_many_arguments)]
pub fn scaling_study(
    tiers: &[EncoderConfig],
    corpora: &[CorpusManifest],
    pretrain: &PretrainConfig,
    demos: &[Demo],
    task: TaskId,
    base: &PolicyConfig,
    seeds: &[u64],
    k: usize,
) -> Result<ScalingResult> {
    if tiers.is_empty() || corpora.is_empty() {
        return Err(Error::InvalidArgument("scaling study needs at least one tier and one corpus".into()));
    }
    let mut arms = Vec::new();
    let mut meta = Vec::new();
    for tier in tiers {
        for corpus in corpora {
            let images = corpus.load_images(tier.image_size)?;
            let cfg = MaeConfig {
                encoder: tier.clone(),
                decoder: DecoderConfig::light(tier),
            };
            log::info!("pre-training {} on {} images", tier.tier_name, images.len());
            let out = mae::pretrain(&cfg, &images, &corpus.fingerprint, pretrain)?;
            let enc = out.checkpoint;
            let name = format!("{}/{}", tier.tier_name, corpus.len());
            meta.push((tier.tier_name.clone(), corpus.len(), corpus.fingerprint.clone(), enc.fingerprint()));
            arms.push(Arm {
                name,
                config: PolicyConfig {
                    feature_dim: enc.config.width,
                    ..base.clone()
                },
                encoder: enc,
                demos: demos.len(),
            });
        }
    }
    let study = run_arms(StudyKind::Scaling, &arms, demos, task, seeds, k)?;
    let cells: Vec<ScalingCell> = meta
        .into_iter()
        .zip(&arms)
        .map(|((tier, corpus_size, corpus_fingerprint, encoder_fingerprint), a)| {
            let row = study.summary.iter().find(|r| r.model == a.name);
            ScalingCell {
                tier,
                corpus_size,
                corpus_fingerprint,
                encoder_fingerprint,
                mean: row.map_or(0.0, |r| r.mean),
                stderr: row.map_or(0.0, |r| r.stderr),
            }
        })
        .collect();
    let (t, c) = (tiers.len(), corpora.len());
    let at = |i: usize, j: usize| cells[i * c + j].mean;
    Ok(ScalingResult {
        bigger_model_same_data: at(t - 1, c - 1) >= at(0, c - 1),
        bigger_model_bigger_data: at(t - 1, c - 1) >= at(0, 0),
        tiers: t,
        corpora: c,
        cells,
        study,
    })
}

/// Inputs shared by every ablation arm.
#[derive(Debug, Clone)]
pub struct AblationBase {
    pub pretrained: EncoderCheckpoint,
    /// Base recipe: wrist camera, images plus proprioception, no
    /// augmentation, frozen encoder.
    pub config: PolicyConfig,
    /// Seed for the from-scratch encoders.
    pub scratch_seed: u64,
    /// Optimizer steps for arms that train the encoder end to end; `None`
    /// keeps the base step count.
    pub end_to_end_steps: Option<usize>,
}

pub const ABLATION_ARMS: [&str; 9] = [
    "baseline",
    "camera-third",
    "image-only",
    "proprio-only",
    "augmentations",
    "finetune",
    "scratch-frozen-vit-tiny",
    "scratch-vit-micro",
    "scratch-vit-tiny",
];

/// The ablation arms, in [`ABLATION_ARMS`] order.
pub fn ablation_arms(base: &AblationBase, n_demos: usize) -> Result<Vec<Arm>> {
    let pre = &base.pretrained;
    let cfg = PolicyConfig {
        feature_dim: pre.config.width,
        camera: Camera::Wrist,
        modality: Modality::ImageProprio,
        augmentations: Augmentations::NONE,
        finetune_encoder: false,
        ..base.config.clone()
    };
    let e2e = |mut c: PolicyConfig, width: usize| {
        c.finetune_encoder = true;
        c.feature_dim = width;
        if let Some(s) = base.end_to_end_steps {
            c.train.steps = s;
        }
        c
    };
    let tiny = EncoderCheckpoint::random(&pre.config, base.scratch_seed)?;
    let micro = EncoderCheckpoint::random(&EncoderConfig::micro().at_image_size(pre.config.image_size)?, base.scratch_seed)?;
    let arm = |name: &str, encoder: &EncoderCheckpoint, config: PolicyConfig| Arm {
        name: name.to_string(),
        encoder: encoder.clone(),
        config,
        demos: n_demos,
    };
    Ok(vec![
        arm("baseline", pre, cfg.clone()),
        arm("camera-third", pre, PolicyConfig { camera: Camera::Third, ..cfg.clone() }),
        arm("image-only", pre, PolicyConfig { modality: Modality::ImageOnly, ..cfg.clone() }),
        arm("proprio-only", pre, PolicyConfig { modality: Modality::ProprioOnly, ..cfg.clone() }),
        arm("augmentations", pre, PolicyConfig { augmentations: Augmentations::ALL, ..cfg.clone() }),
        arm("finetune", pre, e2e(cfg.clone(), pre.config.width)),
        arm("scratch-frozen-vit-tiny", &tiny, PolicyConfig { feature_dim: tiny.config.width, ..cfg.clone() }),
        arm("scratch-vit-micro", &micro, e2e(cfg.clone(), micro.config.width)),
        arm("scratch-vit-tiny", &tiny, e2e(cfg, tiny.config.width)),
    ])
}

/// Every ablation arm trained on the same demos and evaluated on the same
/// grid. The demos need third-person frames for the camera arm.
pub fn ablation_suite(task: TaskId, base: &AblationBase, demos: &[Demo], seeds: &[u64], k: usize) -> Result<StudyResult> {
    let arms = ablation_arms(base, demos.len())?;
    run_arms(StudyKind::Ablation, &arms, demos, task, seeds, k)
}
