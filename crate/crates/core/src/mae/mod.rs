//! Masked-autoencoder pre-training: random masking, the asymmetric
//! encoder/decoder, per-patch normalized reconstruction loss, the training
//! loop, and the supervised classification pre-trainer.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{self, init_block, init_layer_norm, init_linear, trunc_normal, INIT_STD};
use crate::numerics::{AdamWConfig, Graph, NodeId, OptimState, ParamSet, Scalar, Schedule, Tensor};
use crate::vit::{self, scoped, EncoderConfig};

/// Variance floor of the per-patch target normalization.
pub const TARGET_EPS: f64 = 1e-6;
pub const DEFAULT_MASK_RATIO: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub masked_ids: Vec<usize>,
    pub visible_ids: Vec<usize>,
}

impl MaskPlan {
    pub fn ratio(&self) -> f64 {
        self.masked_ids.len() as f64 / self.n_tokens as f64
    }
}

/// Shuffles the token indices and masks the first `floor(ratio * n)`.
pub fn sample_mask(n_tokens: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("cannot mask an empty token set".into()));
    }
    let n_masked = (ratio * n_tokens as f64).floor() as usize;
    let mut ids: Vec<usize> = (0..n_tokens).collect();
    ids.shuffle(rng);
    let mut masked_ids = ids[..n_masked].to_vec();
    let mut visible_ids = ids[n_masked..].to_vec();
    masked_ids.sort_unstable();
    visible_ids.sort_unstable();
    Ok(MaskPlan {
        n_tokens,
        masked_ids,
        visible_ids,
    })
}

/// `(x - mean) / sqrt(var + eps)` per row, population variance.
pub fn normalize_patch_targets<T: Scalar>(patches: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = patches.matrix_dims();
    let mut out = patches.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let n = cols as f64;
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + TARGET_EPS).sqrt();
        for v in row.iter_mut() {
            *v = T::from_f64((v.as_f64() - mean) * inv);
        }
    }
    out.with_requires_grad(false)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl DecoderConfig {
    /// Half the encoder width, two blocks, the encoder's head size.
    pub fn light(encoder: &EncoderConfig) -> Self {
        let width = (encoder.width / 2).max(1);
        let head_dim = encoder.width / encoder.heads;
        DecoderConfig {
            width,
            depth: 2,
            heads: (width / head_dim).max(1),
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} / depth {} / heads {} invalid",
                self.width, self.depth, self.heads
            )));
        }
        if self.width >= encoder.width {
            return Err(Error::Config(format!(
                "decoder width {} must be below encoder width {}",
                self.width, encoder.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Decoder parameters, unprefixed.
pub fn init_decoder<T: Scalar>(config: &MaeConfig, seed: u64) -> Result<ParamSet<T>> {
    config.decoder.validate(&config.encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, wd) = (config.encoder.width, config.decoder.width);
    let mut p = ParamSet::new();
    init_linear(&mut p, "embed", w, wd, &mut rng)?;
    p.insert("mask_token", Tensor::new(vec![1, wd], trunc_normal(&mut rng, wd, INIT_STD))?)?;
    let rows = config.encoder.n_patches() + 1;
    p.insert("pos_embed", Tensor::new(vec![rows, wd], trunc_normal(&mut rng, rows * wd, INIT_STD))?)?;
    for i in 0..config.decoder.depth {
        init_block(&mut p, &format!("blocks.{i}"), wd, &mut rng)?;
    }
    init_layer_norm(&mut p, "norm", wd)?;
    init_linear(&mut p, "pred", wd, config.encoder.patch_dim(), &mut rng)?;
    Ok(p)
}

/// Encoder under `encoder.` and decoder under `decoder.`.
pub fn init_mae<T: Scalar>(config: &MaeConfig, seed: u64) -> Result<ParamSet<T>> {
    let mut p = ParamSet::new();
    p.merge_prefixed("encoder", vit::init(&config.encoder, seed)?)?;
    p.merge_prefixed("decoder", init_decoder(config, seed.wrapping_add(1))?)?;
    Ok(p)
}

/// Batched MAE loss graph. `patches` holds the stacked patch matrices of
/// `plans.len()` images. Returns the loss node and the encoder sequence
/// length (classification token included).
pub fn mae_loss_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    config: &MaeConfig,
    params: &'p ParamSet<T>,
    patches: &Tensor<T>,
    plans: &[MaskPlan],
) -> Result<(NodeId, usize)> {
    let enc = &config.encoder;
    let n = enc.n_patches();
    let batch = plans.len();
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if patches.matrix_dims() != (batch * n, enc.patch_dim()) {
        return Err(Error::Shape(format!("patch matrix {:?} for {batch} images of {n} patches", patches.shape())));
    }
    for plan in plans {
        if plan.n_tokens != n {
            return Err(Error::Shape(format!("mask plan over {} tokens, image has {n}", plan.n_tokens)));
        }
        if plan.masked_ids.is_empty() {
            return Err(Error::InvalidArgument("mask plan hides no patch; loss is undefined".into()));
        }
        if plan.masked_ids.len() != plans[0].masked_ids.len() {
            return Err(Error::Shape("all images in a batch must mask the same number of patches".into()));
        }
    }
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible_ids.clone()).collect();
    let x = g.input(patches.clone().with_requires_grad(false));
    let (tokens, layout) = vit::encoder_graph(g, enc, params, "encoder", x, batch, Some(&visible))?;

    let y = layers::linear(g, params, "decoder.embed", tokens)?;
    let mask = g.param(params, "decoder.mask_token")?;
    let mask_row = batch * layout.seq;
    let pool = g.concat_rows(&[y, mask])?;
    let mut order = Vec::with_capacity(batch * (n + 1));
    for (b, plan) in plans.iter().enumerate() {
        let base = b * layout.seq;
        order.push(base);
        let mut next_visible = plan.visible_ids.iter().enumerate().peekable();
        for i in 0..n {
            match next_visible.peek() {
                Some(&(j, &id)) if id == i => {
                    order.push(base + 1 + j);
                    next_visible.next();
                }
                _ => order.push(mask_row),
            }
        }
    }
    let full = g.gather_rows(pool, order)?;
    let pos = g.param(params, "decoder.pos_embed")?;
    let pos = g.gather_rows(pos, (0..batch).flat_map(|_| 0..n + 1).collect())?;
    let mut h = g.add(full, pos)?;
    for i in 0..config.decoder.depth {
        h = layers::transformer_block(g, params, &format!("decoder.blocks.{i}"), h, config.decoder.heads, n + 1)?;
    }
    let h = layers::layer_norm(g, params, "decoder.norm", h)?;
    let masked_rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.masked_ids.iter().map(move |&i| b * (n + 1) + 1 + i))
        .collect();
    let h = g.gather_rows(h, masked_rows)?;
    let pred = layers::linear(g, params, "decoder.pred", h)?;

    let d = enc.patch_dim();
    let mut target = Vec::with_capacity(batch * plans[0].masked_ids.len() * d);
    for (b, plan) in plans.iter().enumerate() {
        for &i in &plan.masked_ids {
            let r = b * n + i;
            target.extend_from_slice(&patches.data()[r * d..(r + 1) * d]);
        }
    }
    let target = normalize_patch_targets(&Tensor::new(vec![target.len() / d, d], target)?);
    Ok((g.mse(pred, &target)?, layout.seq))
}

/// Masked reconstruction loss of one `[3, H, W]` image.
pub fn mae_forward_loss<T: Scalar>(config: &MaeConfig, params: &ParamSet<T>, image: &Tensor<T>, plan: &MaskPlan) -> Result<T> {
    let patches = vit::patchify(image, config.encoder.patch_size)?;
    let mut g = Graph::new();
    let (loss, _) = mae_loss_graph(&mut g, config, params, &patches, std::slice::from_ref(plan))?;
    Ok(g.value(loss).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1.5e-4,
            weight_decay: 0.05,
            warmup_frac: 0.05,
            mask_ratio: DEFAULT_MASK_RATIO,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn optimizer(&self, steps: u64) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            schedule: Schedule::warmup_cosine(steps, self.warmup_frac),
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainKind {
    Random,
    Mae,
    Supervised,
}

/// A trained (or freshly initialized) encoder and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub kind: PretrainKind,
    pub seed: u64,
    pub corpus_fingerprint: String,
    /// `(step, loss)` after every optimizer step.
    pub loss_curve: Vec<(u64, f64)>,
}

impl EncoderCheckpoint {
    /// Randomly initialized, untrained encoder.
    pub fn random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Ok(EncoderCheckpoint {
            config: config.clone(),
            params: vit::init(config, seed)?,
            kind: PretrainKind::Random,
            seed,
            corpus_fingerprint: String::new(),
            loss_curve: Vec::new(),
        })
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Mean loss of each epoch given the number of steps per epoch.
    pub fn epoch_losses(&self, steps_per_epoch: usize) -> Vec<f64> {
        self.loss_curve
            .chunks(steps_per_epoch.max(1))
            .map(|c| c.iter().map(|(_, l)| l).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: EncoderCheckpoint,
    /// Decoder parameters, kept apart from the transferable encoder.
    pub decoder: ParamSet,
    pub steps_per_epoch: usize,
    /// Encoder sequence length seen by attention, classification token included.
    pub encoder_seq_len: usize,
}

impl PretrainOutput {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.checkpoint.epoch_losses(self.steps_per_epoch)
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

fn stack_patches(images: &[Tensor], ids: &[usize], patch: usize) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut count = 0;
    let mut dim = 0;
    for &i in ids {
        let p = vit::patchify(&images[i], patch)?;
        (count, dim) = (count + p.matrix_dims().0, p.matrix_dims().1);
        rows.extend(p.into_data());
    }
    Tensor::new(vec![count, dim], rows)
}

fn check_images(config: &EncoderConfig, images: &[Tensor]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("pre-training corpus is empty".into()));
    }
    let want = [3, config.image_size, config.image_size];
    if let Some(bad) = images.iter().position(|i| i.shape() != want) {
        return Err(Error::Shape(format!(
            "corpus image {bad} is {:?}, encoder expects {want:?}",
            images[bad].shape()
        )));
    }
    Ok(())
}

/// MAE pre-training over `images` (`[3, H, W]` in [-1, 1]).
pub fn pretrain(config: &MaeConfig, images: &[Tensor], corpus_fingerprint: &str, run: &PretrainConfig) -> Result<PretrainOutput> {
    config.encoder.validate()?;
    config.decoder.validate(&config.encoder)?;
    check_images(&config.encoder, images)?;
    let mut params = init_mae::<f32>(config, run.seed)?;
    let spe = steps_per_epoch(images.len(), run.batch_size);
    let mut opt = OptimState::new(run.optimizer((spe * run.epochs) as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x6d61_655f_7472_6e21);
    let mut curve = Vec::with_capacity(spe * run.epochs);
    let mut seq_len = 1 + config.encoder.n_patches();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..run.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(run.batch_size.max(1)) {
            let patches = stack_patches(images, batch, config.encoder.patch_size)?;
            let plans = batch
                .iter()
                .map(|_| sample_mask(config.encoder.n_patches(), run.mask_ratio, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let grads = {
                let mut g = Graph::new();
                let (loss, seq) = mae_loss_graph(&mut g, config, &params, &patches, &plans)?;
                seq_len = seq;
                let l = g.value(loss).data()[0] as f64;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "masked loss {l} at epoch {} step {}",
                        epoch + 1,
                        opt.step_count() + 1
                    )));
                }
                curve.push((opt.step_count() + 1, l));
                g.backward(loss)?.for_params(&params)
            };
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("gradient at step {}", opt.step_count() + 1)));
            }
            opt.step(&mut params, &grads)?;
        }
        let n = spe.min(curve.len());
        let mean = curve[curve.len() - n..].iter().map(|(_, l)| l).sum::<f64>() / n as f64;
        log::info!("pretrain epoch {}/{}: masked loss {mean:.4}", epoch + 1, run.epochs);
    }
    Ok(PretrainOutput {
        checkpoint: EncoderCheckpoint {
            config: config.encoder.clone(),
            params: params.extract_prefixed("encoder"),
            kind: PretrainKind::Mae,
            seed: run.seed,
            corpus_fingerprint: corpus_fingerprint.to_string(),
            loss_curve: curve,
        },
        decoder: params.extract_prefixed("decoder"),
        steps_per_epoch: spe,
        encoder_seq_len: seq_len,
    })
}

#[derive(Debug, Clone)]
pub struct SupervisedOutput {
    pub checkpoint: EncoderCheckpoint,
    pub steps_per_epoch: usize,
    /// Training-set accuracy measured during the final epoch.
    pub final_accuracy: f64,
}

/// Classification pre-training through a linear head on the classification
/// token; the head is dropped from the returned checkpoint.
pub fn pretrain_supervised(
    config: &EncoderConfig,
    images: &[Tensor],
    labels: &[usize],
    n_classes: usize,
    corpus_fingerprint: &str,
    run: &PretrainConfig,
) -> Result<SupervisedOutput> {
    config.validate()?;
    check_images(config, images)?;
    if labels.len() != images.len() {
        return Err(Error::Shape(format!("{} labels for {} images", labels.len(), images.len())));
    }
    if n_classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {n_classes} classes")));
    }
    let mut params = ParamSet::<f32>::new();
    params.merge_prefixed("encoder", vit::init(config, run.seed)?)?;
    let mut head = ParamSet::new();
    init_linear(&mut head, "fc", config.width, n_classes, &mut ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(1)))?;
    params.merge_prefixed("head", head)?;
    let spe = steps_per_epoch(images.len(), run.batch_size);
    let mut opt = OptimState::new(run.optimizer((spe * run.epochs) as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x7375_7065_7276_6973);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut correct = 0usize;
    for epoch in 0..run.epochs {
        order.shuffle(&mut rng);
        correct = 0;
        for batch in order.chunks(run.batch_size.max(1)) {
            let patches = stack_patches(images, batch, config.patch_size)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut g = Graph::new();
                let x = g.input(patches);
                let (tokens, layout) = vit::encoder_graph(&mut g, config, &params, "encoder", x, batch.len(), None)?;
                let cls = g.gather_rows(tokens, (0..batch.len()).map(|b| b * layout.seq).collect())?;
                let logits = layers::linear(&mut g, &params, &scoped("head", "fc"), cls)?;
                for (b, row) in g.value(logits).data().chunks(n_classes).enumerate() {
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                        .0;
                    correct += usize::from(arg == y[b]);
                }
                let loss = g.softmax_cross_entropy(logits, &y)?;
                let l = g.value(loss).data()[0] as f64;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("classification loss {l} at epoch {}", epoch + 1)));
                }
                curve.push((opt.step_count() + 1, l));
                g.backward(loss)?.for_params(&params)
            };
            opt.step(&mut params, &grads)?;
        }
        log::info!(
            "supervised epoch {}/{}: accuracy {:.3}",
            epoch + 1,
            run.epochs,
            correct as f64 / images.len() as f64
        );
    }
    Ok(SupervisedOutput {
        checkpoint: EncoderCheckpoint {
            config: config.clone(),
            params: params.extract_prefixed("encoder"),
            kind: PretrainKind::Supervised,
            seed: run.seed,
            corpus_fingerprint: corpus_fingerprint.to_string(),
            loss_curve: curve,
        },
        steps_per_epoch: spe,
        final_accuracy: if run.epochs == 0 { 0.0 } else { correct as f64 / images.len() as f64 },
    })
}

/// Writes `step,loss` rows.
pub fn write_loss_csv(path: &Path, curve: &[(u64, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "step,loss").map_err(|e| Error::io(path, e))?;
    for (s, l) in curve {
        writeln!(f, "{s},{l}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
