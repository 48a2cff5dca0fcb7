//! Behavior cloning on top of a (usually frozen) visual encoder: feature
//! extraction, the projection + SeLU MLP controller, training, rollouts and
//! the demonstration format.

mod augment;
mod demo;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, EncoderMeta};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mae::EncoderCheckpoint;
use crate::numerics::{AdamWConfig, Graph, NodeId, OptimState, ParamSet, Schedule, Tensor};
use crate::simworld::{self, Camera, EmbodimentKind, Expert, SimState, TaskId, Variation, DELTA_MAX};
use crate::vit;

pub use augment::{jitter, shift, Augmentations, CROP_PAD};
pub use demo::{
    collect_demos, demo_dirs, load_demos, replay, scripted_episode, Demo, DemoRecord, DemoRecorder, DemoSource, DemoStep,
    ReplayVerdict, DEMO_FILE, DEMO_SCHEMA, REPLAY_TOL,
};

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 128, 64];
/// Wider controller for the cluttered pick task.
pub const CLUTTER_HIDDEN: [usize; 3] = [512, 256, 128];
pub const EMBED_DIM: usize = 128;
const NORM_PREFIXES: [&str; 2] = ["feat_norm", "prop_norm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    #[serde(rename = "image+proprio")]
    ImageProprio,
    ImageOnly,
    ProprioOnly,
}

impl Modality {
    pub fn uses_image(self) -> bool {
        self != Modality::ProprioOnly
    }

    pub fn uses_proprio(self) -> bool {
        self != Modality::ImageOnly
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image+proprio" | "both" => Ok(Modality::ImageProprio),
            "image-only" | "image" => Ok(Modality::ImageOnly),
            "proprio-only" | "proprio" => Ok(Modality::ProprioOnly),
            _ => Err(Error::InvalidArgument(format!("unknown modality `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Augmented copies of each frame whose features are precomputed when
    /// the encoder is frozen.
    pub aug_copies: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            aug_copies: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden_sizes: Vec<usize>,
    pub embed_dim: usize,
    /// Joint count of the robot; the gripper has its own head.
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub feature_dim: usize,
    pub gripper: bool,
    pub modality: Modality,
    pub finetune_encoder: bool,
    pub augmentations: Augmentations,
    pub camera: Camera,
    pub delta_max: f64,
    pub train: TrainConfig,
}

impl PolicyConfig {
    /// Defaults for `task` on top of features of width `feature_dim`.
    pub fn for_task(task: TaskId, feature_dim: usize) -> Self {
        let emb = task.embodiment();
        PolicyConfig {
            hidden_sizes: if task == TaskId::PickClutter { CLUTTER_HIDDEN } else { DEFAULT_HIDDEN }.to_vec(),
            embed_dim: EMBED_DIM,
            action_dim: emb.n_joints(),
            proprio_dim: emb.proprio_dim(),
            feature_dim,
            gripper: emb.kind == EmbodimentKind::Arm3,
            modality: Modality::ImageProprio,
            finetune_encoder: false,
            augmentations: Augmentations::NONE,
            camera: Camera::Wrist,
            delta_max: DELTA_MAX,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.len() != 3 || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(format!("hidden_sizes must be three positive widths, got {:?}", self.hidden_sizes)));
        }
        if self.embed_dim == 0 || self.action_dim == 0 || self.proprio_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("embed, action, proprio and feature dims must be positive".into()));
        }
        if !(self.delta_max > 0.0) {
            return Err(Error::Config(format!("delta_max {} must be positive", self.delta_max)));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.finetune_encoder && !self.modality.uses_image() {
            return Err(Error::Config("finetuning the encoder needs the image modality".into()));
        }
        Ok(())
    }

    pub fn embodiment_kind(&self) -> EmbodimentKind {
        if self.gripper {
            EmbodimentKind::Arm3
        } else {
            EmbodimentKind::Fingers
        }
    }

    fn input_width(&self) -> usize {
        self.embed_dim * (self.modality.uses_image() as usize + self.modality.uses_proprio() as usize)
    }
}

fn lecun(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    Tensor::from_fn(vec![fan_in, fan_out], |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

fn add_linear(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Result<()> {
    p.insert(format!("{name}.w"), lecun(rng, fan_in, fan_out, gain))?;
    p.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]))
}

/// Fresh controller parameters with identity input normalization.
pub fn init_policy(config: &PolicyConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (prefix, dim) in [("feat_norm", config.feature_dim), ("prop_norm", config.proprio_dim)] {
        p.insert(format!("{prefix}.mean"), Tensor::zeros(vec![dim]))?;
        p.insert(format!("{prefix}.inv_std"), Tensor::full(vec![dim], 1.0))?;
        p.freeze(prefix);
    }
    if config.modality.uses_image() {
        add_linear(&mut p, "proj_img", config.feature_dim, config.embed_dim, 1.0, &mut rng)?;
    }
    if config.modality.uses_proprio() {
        add_linear(&mut p, "proj_prop", config.proprio_dim, config.embed_dim, 1.0, &mut rng)?;
    }
    let mut width = config.input_width();
    for (i, &h) in config.hidden_sizes.iter().enumerate() {
        add_linear(&mut p, &format!("mlp.{i}"), width, h, 1.0, &mut rng)?;
        width = h;
    }
    add_linear(&mut p, "out", width, config.action_dim, 0.1, &mut rng)?;
    if config.gripper {
        add_linear(&mut p, "grip", width, 1, 0.1, &mut rng)?;
    }
    Ok(p)
}

fn linear<'p>(g: &mut Graph<'p, f32>, p: &'p ParamSet, name: &str, x: NodeId) -> Result<NodeId> {
    crate::numerics::layers::linear(g, p, name, x)
}

/// `(x - mean) * inv_std` with the statistics stored under `prefix`.
fn normalize<'p>(g: &mut Graph<'p, f32>, p: &'p ParamSet, prefix: &str, x: NodeId) -> Result<NodeId> {
    let (rows, cols) = g.value(x).matrix_dims();
    let neg_mean = p.get(&format!("{prefix}.mean"))?.map(|v| -v);
    let inv = p.get(&format!("{prefix}.inv_std"))?;
    if neg_mean.len() != cols {
        return Err(Error::Shape(format!("{prefix} expects width {}, input has {cols}", neg_mean.len())));
    }
    let nm = g.input(neg_mean);
    let centered = g.add_row(x, nm)?;
    let scale = Tensor::from_fn(vec![rows, cols], |i| inv.data()[i % cols]);
    let s = g.input(scale);
    g.mul(centered, s)
}

/// Controller head over raw features `[B, F]` and proprio `[B, P]`. Returns
/// the normalized joint action (units of `delta_max`) and the gripper logit.
fn controller_graph<'p>(
    g: &mut Graph<'p, f32>,
    config: &PolicyConfig,
    p: &'p ParamSet,
    features: Option<NodeId>,
    proprio: Option<NodeId>,
) -> Result<(NodeId, Option<NodeId>)> {
    let mut parts = Vec::new();
    if config.modality.uses_image() {
        let f = features.ok_or_else(|| Error::Shape("image features required by modality".into()))?;
        let f = normalize(g, p, "feat_norm", f)?;
        parts.push(linear(g, p, "proj_img", f)?);
    }
    if config.modality.uses_proprio() {
        let q = proprio.ok_or_else(|| Error::Shape("proprioception required by modality".into()))?;
        let q = normalize(g, p, "prop_norm", q)?;
        parts.push(linear(g, p, "proj_prop", q)?);
    }
    let mut h = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
    for i in 0..config.hidden_sizes.len() {
        let z = linear(g, p, &format!("mlp.{i}"), h)?;
        h = g.selu(z);
    }
    let act = linear(g, p, "out", h)?;
    let grip = if config.gripper { Some(linear(g, p, "grip", h)?) } else { None };
    Ok((act, grip))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAction {
    /// Delta joint angles, clamped to `delta_max`.
    pub joints: Vec<f64>,
    /// Closing probability for embodiments with a gripper.
    pub gripper_prob: Option<f64>,
}

impl PolicyAction {
    /// Simulator action: joint deltas, then the gripper command.
    pub fn to_sim(&self) -> Vec<f64> {
        let mut a = self.joints.clone();
        if let Some(p) = self.gripper_prob {
            a.push(if p > 0.5 { 1.0 } else { 0.0 });
        }
        a
    }
}

fn row_tensor(v: &[f64]) -> Tensor {
    Tensor::from_fn(vec![1, v.len()], |i| v[i] as f32)
}

/// One controller evaluation. `feature` may be omitted in proprio-only mode.
pub fn policy_forward(config: &PolicyConfig, params: &ParamSet, feature: Option<&Tensor>, proprio: &[f64]) -> Result<PolicyAction> {
    if config.modality.uses_proprio() && proprio.len() != config.proprio_dim {
        return Err(Error::Shape(format!("proprio of length {}, policy expects {}", proprio.len(), config.proprio_dim)));
    }
    let mut g = Graph::new();
    let f = match (config.modality.uses_image(), feature) {
        (true, Some(f)) if f.len() == config.feature_dim => Some(g.input(f.clone().reshape(vec![1, f.len()])?)),
        (true, Some(f)) => {
            return Err(Error::Shape(format!("feature of length {}, policy expects {}", f.len(), config.feature_dim)))
        }
        (true, None) => return Err(Error::Shape("image features required by modality".into())),
        (false, _) => None,
    };
    let q = config.modality.uses_proprio().then(|| g.input(row_tensor(proprio)));
    let (act, grip) = controller_graph(&mut g, config, params, f, q)?;
    let joints = g
        .value(act)
        .data()
        .iter()
        .map(|v| (*v as f64 * config.delta_max).clamp(-config.delta_max, config.delta_max))
        .collect();
    let gripper_prob = grip.map(|n| crate::numerics::sigmoid(g.value(n).data()[0] as f64));
    Ok(PolicyAction { joints, gripper_prob })
}

/// Classification-token feature of one image.
pub fn extract_features(encoder: &EncoderCheckpoint, image: &Tensor) -> Result<Tensor> {
    Ok(vit::encode(&encoder.config, &encoder.params, image)?.cls_feature)
}

fn image_tensor(img: &RgbImage, size: usize) -> Tensor {
    if img.width == size && img.height == size {
        img.to_tensor()
    } else {
        img.center_crop_resize(size).to_tensor()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub config: PolicyConfig,
    pub params: ParamSet,
    /// Fingerprint of the encoder the policy was trained on.
    pub encoder_fingerprint: String,
    /// Finetuned encoder, embedded when `finetune_encoder` is set.
    pub encoder: Option<EncoderCheckpoint>,
    pub seed: u64,
    pub loss_curve: Vec<(u64, f64)>,
}

pub const POLICY_KIND: &str = "policy";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyMeta {
    config: PolicyConfig,
    encoder_fingerprint: String,
    seed: u64,
    fingerprint: String,
    loss_curve: Vec<(u64, f64)>,
    encoder: Option<EncoderMeta>,
}

impl PolicyCheckpoint {
    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    fn meta_and_params(&self) -> Result<(PolicyMeta, ParamSet)> {
        let mut params = self.params.clone();
        if let Some(enc) = &self.encoder {
            params.merge_prefixed("encoder", enc.params.clone())?;
        }
        Ok((
            PolicyMeta {
                config: self.config.clone(),
                encoder_fingerprint: self.encoder_fingerprint.clone(),
                seed: self.seed,
                fingerprint: self.fingerprint(),
                loss_curve: self.loss_curve.clone(),
                encoder: self.encoder.as_ref().map(|e| e.meta()),
            },
            params,
        ))
    }

    fn from_parts(meta: PolicyMeta, mut all: ParamSet, path: &Path) -> Result<Self> {
        let encoder = match meta.encoder {
            Some(em) => {
                let enc = all.extract_prefixed("encoder");
                Some(EncoderCheckpoint::from_meta(em, enc, path)?)
            }
            None => None,
        };
        let mut params = ParamSet::new();
        for (name, t) in all.iter_mut() {
            if !name.starts_with("encoder.") {
                params.insert(name.clone(), t.clone())?;
            }
        }
        for p in NORM_PREFIXES {
            params.freeze(p);
        }
        let ck = PolicyCheckpoint {
            config: meta.config,
            params,
            encoder_fingerprint: meta.encoder_fingerprint,
            encoder,
            seed: meta.seed,
            loss_curve: meta.loss_curve,
        };
        if ck.fingerprint() != meta.fingerprint {
            return Err(Error::format(path, "policy tensors do not match the recorded fingerprint"));
        }
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (meta, params) = self.meta_and_params()?;
        checkpoint::encode(POLICY_KIND, &meta, &params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let path = Path::new("<memory>");
        let (meta, params) = checkpoint::decode(bytes, POLICY_KIND, path)?;
        Self::from_parts(meta, params, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (meta, params) = self.meta_and_params()?;
        checkpoint::write(path, POLICY_KIND, &meta, &params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::read(path, POLICY_KIND)?;
        Self::from_parts(meta, params, path)
    }
}

/// Flattened training samples drawn from a demo set.
struct Samples {
    /// `(demo, step)` of each sample.
    index: Vec<(usize, usize)>,
    proprio: Vec<Vec<f64>>,
    /// Normalized joint actions.
    action: Vec<Vec<f64>>,
    gripper: Vec<f32>,
}

fn check_demos(demos: &[Demo], config: &PolicyConfig) -> Result<()> {
    let first = demos.first().ok_or_else(|| Error::InvalidArgument("no demonstrations".into()))?;
    let kind = first.record.embodiment;
    for d in demos {
        d.validate()?;
        if d.record.embodiment != kind {
            return Err(Error::Embodiment {
                expected: kind.name().into(),
                found: d.record.embodiment.name().into(),
            });
        }
    }
    if kind != config.embodiment_kind() || first.record.task.embodiment().n_joints() != config.action_dim {
        return Err(Error::Embodiment {
            expected: config.embodiment_kind().name().into(),
            found: kind.name().into(),
        });
    }
    if demos.iter().all(|d| d.is_empty()) {
        return Err(Error::InvalidArgument("demonstrations contain no steps".into()));
    }
    Ok(())
}

fn samples(demos: &[Demo], config: &PolicyConfig) -> Samples {
    let mut s = Samples {
        index: Vec::new(),
        proprio: Vec::new(),
        action: Vec::new(),
        gripper: Vec::new(),
    };
    for (d, demo) in demos.iter().enumerate() {
        for (t, step) in demo.record.steps.iter().enumerate() {
            s.index.push((d, t));
            s.proprio.push(demo.policy_proprio(t));
            s.action.push(step.action.iter().map(|a| a / config.delta_max).collect());
            s.gripper.push(step.gripper.map(|g| (g > 0.5) as u8 as f32).unwrap_or(0.0));
        }
    }
    s
}

fn set_stats(params: &mut ParamSet, prefix: &str, rows: &[&[f32]]) -> Result<()> {
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += *v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (*v as f64 - m).powi(2) / n;
        }
    }
    let inv: Vec<f32> = var
        .iter()
        .map(|v| {
            let sd = v.sqrt();
            // constant inputs keep their scale
            if sd < 1e-3 {
                1.0
            } else {
                (1.0 / sd) as f32
            }
        })
        .collect();
    *params.get_mut(&format!("{prefix}.mean"))? = Tensor::new(vec![dim], mean.iter().map(|m| *m as f32).collect())?;
    *params.get_mut(&format!("{prefix}.inv_std"))? = Tensor::new(vec![dim], inv)?;
    Ok(())
}

fn demo_images(demos: &[Demo], camera: Camera) -> Result<Vec<&[RgbImage]>> {
    demos.iter().map(|d| d.frames(camera)).collect()
}

const FEATURE_CHUNK: usize = 64;

/// Trains a controller on `demos` with `encoder` providing image features.
pub fn train_bc(demos: &[Demo], encoder: &EncoderCheckpoint, config: &PolicyConfig, seed: u64) -> Result<PolicyCheckpoint> {
    config.validate()?;
    check_demos(demos, config)?;
    if config.modality.uses_image() && config.feature_dim != encoder.config.width {
        return Err(Error::Shape(format!(
            "policy feature_dim {} does not match encoder width {}",
            config.feature_dim, encoder.config.width
        )));
    }
    let data = samples(demos, config);
    let n = data.index.len();
    let size = encoder.config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6263_5f74_7261_696e);
    let mut params = init_policy(config, seed)?;

    let frames = if config.modality.uses_image() { demo_images(demos, config.camera)? } else { Vec::new() };
    let frame = |i: usize| -> &RgbImage {
        let (d, t) = data.index[i];
        &frames[d][t]
    };

    // Features of each (augmented copy, sample), frozen encoder only.
    let mut features: Vec<Vec<Tensor>> = Vec::new();
    if config.modality.uses_image() {
        let clean: Vec<Tensor> = (0..n).map(|i| image_tensor(frame(i), size)).collect();
        let base = vit::cls_features(&encoder.config, &encoder.params, &clean, FEATURE_CHUNK, true)?;
        let rows: Vec<&[f32]> = base.iter().map(|t| t.data()).collect();
        set_stats(&mut params, "feat_norm", &rows)?;
        if !config.finetune_encoder {
            if config.augmentations.any() {
                for _ in 0..config.train.aug_copies.max(1) {
                    let imgs: Vec<Tensor> =
                        (0..n).map(|i| image_tensor(&config.augmentations.apply(frame(i), &mut rng), size)).collect();
                    features.push(vit::cls_features(&encoder.config, &encoder.params, &imgs, FEATURE_CHUNK, true)?);
                }
            } else {
                features.push(base);
            }
        }
    }
    let prop_rows: Vec<Vec<f32>> = data.proprio.iter().map(|p| p.iter().map(|v| *v as f32).collect()).collect();
    let prop_refs: Vec<&[f32]> = prop_rows.iter().map(|r| r.as_slice()).collect();
    set_stats(&mut params, "prop_norm", &prop_refs)?;

    if config.finetune_encoder {
        params.merge_prefixed("encoder", encoder.params.clone())?;
    }
    let steps = config.train.steps;
    let mut opt = OptimState::new(AdamWConfig {
        lr: config.train.lr,
        weight_decay: config.train.weight_decay,
        schedule: Schedule::warmup_cosine(steps as u64, 0.05),
        ..Default::default()
    });
    let bs = config.train.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let targets = Tensor::from_fn(vec![bs, config.action_dim], |k| {
            data.action[batch[k / config.action_dim]][k % config.action_dim] as f32
        });
        let grip_t: Vec<f32> = batch.iter().map(|&i| data.gripper[i]).collect();
        let grads = {
            let mut g = Graph::new();
            let feats = if !config.modality.uses_image() {
                None
            } else if config.finetune_encoder {
                let mut rows = Vec::with_capacity(bs * encoder.config.n_patches() * encoder.config.patch_dim());
                for &i in &batch {
                    let img = if config.augmentations.any() {
                        config.augmentations.apply(frame(i), &mut rng)
                    } else {
                        frame(i).clone()
                    };
                    rows.extend(vit::patchify(&image_tensor(&img, size), encoder.config.patch_size)?.into_data());
                }
                let x = g.input(Tensor::new(vec![bs * encoder.config.n_patches(), encoder.config.patch_dim()], rows)?);
                let (tokens, layout) = vit::encoder_graph(&mut g, &encoder.config, &params, "encoder", x, bs, None)?;
                Some(g.gather_rows(tokens, (0..bs).map(|b| b * layout.seq).collect())?)
            } else {
                let copy = &features;
                let w = config.feature_dim;
                let mut rows = Vec::with_capacity(bs * w);
                for &i in &batch {
                    let c = if copy.len() > 1 { rng.random_range(0..copy.len()) } else { 0 };
                    rows.extend_from_slice(copy[c][i].data());
                }
                Some(g.input(Tensor::new(vec![bs, w], rows)?))
            };
            let props = config.modality.uses_proprio().then(|| {
                let p = config.proprio_dim;
                g.input(Tensor::from_fn(vec![bs, p], |k| data.proprio[batch[k / p]][k % p] as f32))
            });
            let (act, grip) = controller_graph(&mut g, config, &params, feats, props)?;
            let mut loss = g.mse(act, &targets)?;
            if let Some(gl) = grip {
                let b = g.bce_with_logits(gl, &grip_t)?;
                loss = g.add(loss, b)?;
            }
            let l = g.value(loss).data()[0] as f64;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("behavior-cloning loss {l} at step {}", opt.step_count() + 1)));
            }
            curve.push((opt.step_count() + 1, l));
            g.backward(loss)?.for_params(&params)
        };
        opt.step(&mut params, &grads)?;
    }
    if let Some((_, l)) = curve.last() {
        log::info!("train_bc: {steps} steps on {n} samples, final loss {l:.5}");
    }
    let tuned = if config.finetune_encoder {
        Some(EncoderCheckpoint {
            params: params.extract_prefixed("encoder"),
            ..encoder.clone()
        })
    } else {
        None
    };
    let mut head = ParamSet::new();
    for (name, t) in params.iter() {
        if !name.starts_with("encoder.") {
            head.insert(name.clone(), t.clone())?;
        }
    }
    for p in NORM_PREFIXES {
        head.freeze(p);
    }
    Ok(PolicyCheckpoint {
        config: config.clone(),
        params: head,
        encoder_fingerprint: encoder.fingerprint(),
        encoder: tuned,
        seed,
        loss_curve: curve,
    })
}

/// Something that maps simulator states to simulator actions.
pub trait Controller: Send {
    fn name(&self) -> &str;
    /// Embodiment the controller drives; `None` for any.
    fn embodiment(&self) -> Option<EmbodimentKind>;
    /// Called at the start of every episode.
    fn reset(&mut self, _seed: u64) {}
    fn act(&mut self, state: &SimState) -> Result<Vec<f64>>;
}

/// A trained controller bound to the encoder that feeds it.
#[derive(Debug, Clone)]
pub struct BcPolicy {
    pub name: String,
    pub checkpoint: PolicyCheckpoint,
    encoder: EncoderCheckpoint,
}

impl BcPolicy {
    /// Fails unless `encoder` is the one the policy was trained on. A
    /// finetuned policy uses its embedded encoder instead.
    pub fn new(name: &str, checkpoint: PolicyCheckpoint, encoder: &EncoderCheckpoint) -> Result<Self> {
        let encoder = match &checkpoint.encoder {
            Some(e) => e.clone(),
            None => {
                let found = encoder.fingerprint();
                if found != checkpoint.encoder_fingerprint {
                    return Err(Error::Fingerprint {
                        expected: checkpoint.encoder_fingerprint.clone(),
                        found,
                    });
                }
                encoder.clone()
            }
        };
        Ok(BcPolicy {
            name: name.to_string(),
            checkpoint,
            encoder,
        })
    }

    pub fn encoder(&self) -> &EncoderCheckpoint {
        &self.encoder
    }

    pub fn action_for(&self, image: &RgbImage, proprio: &[f64]) -> Result<PolicyAction> {
        let cfg = &self.checkpoint.config;
        let feat = if cfg.modality.uses_image() {
            Some(extract_features(&self.encoder, &image_tensor(image, self.encoder.config.image_size))?)
        } else {
            None
        };
        policy_forward(cfg, &self.checkpoint.params, feat.as_ref(), proprio)
    }
}

impl Controller for BcPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn embodiment(&self) -> Option<EmbodimentKind> {
        Some(self.checkpoint.config.embodiment_kind())
    }

    fn act(&mut self, state: &SimState) -> Result<Vec<f64>> {
        let cfg = &self.checkpoint.config;
        let image = if cfg.modality.uses_image() {
            simworld::render(state, cfg.camera)
        } else {
            RgbImage::filled(1, 1, [0, 0, 0])
        };
        Ok(self.action_for(&image, &state.proprio())?.to_sim())
    }
}

/// The scripted expert as a controller.
#[derive(Debug, Clone)]
pub struct ExpertController {
    pub sigma: f64,
    expert: Expert,
}

impl ExpertController {
    pub fn new(sigma: f64) -> Self {
        ExpertController {
            sigma,
            expert: Expert::new(sigma, 0),
        }
    }
}

impl Controller for ExpertController {
    fn name(&self) -> &str {
        "scripted-expert"
    }

    fn embodiment(&self) -> Option<EmbodimentKind> {
        None
    }

    fn reset(&mut self, seed: u64) {
        self.expert = Expert::new(self.sigma, seed);
    }

    fn act(&mut self, state: &SimState) -> Result<Vec<f64>> {
        self.expert.act(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskId,
    pub variation: Option<usize>,
    pub proprio: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
    pub steps: usize,
    pub final_state: SimState,
}

/// Closed-loop episode: observe, act, step, until success or `max_steps`.
pub fn rollout(controller: &mut dyn Controller, task: TaskId, variation: Variation, seed: u64, max_steps: usize) -> Result<Trajectory> {
    if let Some(kind) = controller.embodiment() {
        if kind != task.embodiment_kind() {
            return Err(Error::Embodiment {
                expected: task.embodiment_kind().name().into(),
                found: kind.name().into(),
            });
        }
    }
    controller.reset(seed);
    let mut state = simworld::reset(task, variation, seed)?;
    let mut traj = Trajectory {
        task,
        variation: state.variation,
        proprio: Vec::new(),
        actions: Vec::new(),
        success: simworld::success(&state),
        steps: 0,
        final_state: state.clone(),
    };
    while !traj.success && traj.steps < max_steps {
        let a = controller.act(&state)?;
        traj.proprio.push(state.proprio());
        state = simworld::step(&state, &a)?;
        traj.actions.push(a);
        traj.steps += 1;
        traj.success = simworld::success(&state);
    }
    traj.final_state = state;
    Ok(traj)
}

/// Mean squared joint-action error in rad² of `policy` on the demo frames.
pub fn action_mse(policy: &BcPolicy, demos: &[Demo]) -> Result<f64> {
    let cfg = &policy.checkpoint.config;
    let mut total = 0.0;
    let mut count = 0usize;
    for d in demos {
        let frames = if cfg.modality.uses_image() { Some(d.frames(cfg.camera)?) } else { None };
        let feats = match frames {
            Some(f) => {
                let size = policy.encoder.config.image_size;
                let imgs: Vec<Tensor> = f.iter().map(|i| image_tensor(i, size)).collect();
                Some(vit::cls_features(&policy.encoder.config, &policy.encoder.params, &imgs, FEATURE_CHUNK, true)?)
            }
            None => None,
        };
        for (t, step) in d.record.steps.iter().enumerate() {
            let out = policy_forward(cfg, &policy.checkpoint.params, feats.as_ref().map(|f| &f[t]), &d.policy_proprio(t))?;
            for (p, a) in out.joints.iter().zip(&step.action) {
                total += (p - a).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no demo steps to score".into()));
    }
    Ok(total / count as f64)
}
