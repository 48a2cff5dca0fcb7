//! Vision Transformer encoder: patchify, embedding, classification token,
//! pre-norm blocks, and analytic parameter/FLOP accounting for the size tiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{self, block_param_count, init_block, init_layer_norm, init_linear, trunc_normal, INIT_STD};
use crate::numerics::{Graph, NodeId, ParamSet, Scalar, Tensor};

/// Parameter count of the ResNet-50 reference model.
pub const RESNET50_PARAMS: u64 = 25_600_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub tier_name: String,
}

impl EncoderConfig {
    pub fn new(image_size: usize, patch_size: usize, width: usize, depth: usize, heads: usize, tier_name: &str) -> Result<Self> {
        let c = EncoderConfig {
            image_size,
            patch_size,
            width,
            depth,
            heads,
            tier_name: tier_name.to_string(),
        };
        c.validate()?;
        Ok(c)
    }

    /// Trainable desk-scale tier: 96 wide, 4 blocks, 4 heads, 8 px patches on 64 px images.
    pub fn tiny() -> Self {
        Self::new(64, 8, 96, 4, 4, "ViT-Tiny").unwrap()
    }

    /// Smaller scratch architecture used as an ablation arm.
    pub fn micro() -> Self {
        Self::new(64, 8, 48, 2, 2, "ViT-Micro").unwrap()
    }

    pub fn small() -> Self {
        Self::new(224, 16, 384, 12, 6, "ViT-Small").unwrap()
    }

    pub fn base() -> Self {
        Self::new(224, 16, 768, 12, 12, "ViT-Base").unwrap()
    }

    pub fn large() -> Self {
        Self::new(224, 16, 1024, 24, 16, "ViT-Large").unwrap()
    }

    /// Looks up a tier by short name (`vit-t`, `vit-s`, `small`, `ViT-Large`, ...).
    pub fn from_tier(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase().replace(['_', ' '], "-");
        let key = key.strip_prefix("vit-").unwrap_or(&key);
        match key {
            "m" | "micro" => Ok(Self::micro()),
            "t" | "tiny" => Ok(Self::tiny()),
            "s" | "small" => Ok(Self::small()),
            "b" | "base" => Ok(Self::base()),
            "l" | "large" => Ok(Self::large()),
            _ => Err(Error::Config(format!("unknown encoder tier `{name}`"))),
        }
    }

    /// Same architecture at another input resolution.
    pub fn at_image_size(&self, image_size: usize) -> Result<Self> {
        let mut c = self.clone();
        c.image_size = image_size;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls_feature: Tensor,
    pub patch_tokens: Tensor,
}

/// Splits a `[3, H, W]` image into row-major patches. Each patch vector is
/// ordered `(dy, dx, channel)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::Shape(format!("expected a square [3, H, W] image, got {s:?}")));
    }
    let size = s[1];
    if patch_size == 0 || size % patch_size != 0 {
        return Err(Error::Config(format!("image size {size} not divisible by patch size {patch_size}")));
    }
    let g = size / patch_size;
    let d = 3 * patch_size * patch_size;
    let src = image.data();
    let mut out = vec![T::zero(); g * g * d];
    for py in 0..g {
        for px in 0..g {
            let base = (py * g + px) * d;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let (y, x) = (py * patch_size + dy, px * patch_size + dx);
                    for c in 0..3 {
                        out[base + (dy * patch_size + dx) * 3 + c] = src[(c * size + y) * size + x];
                    }
                }
            }
        }
    }
    Tensor::new(vec![g * g, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let (n, d) = patches.matrix_dims();
    let g = (n as f64).sqrt().round() as usize;
    if patches.ndim() != 2 || g * g != n || d != 3 * patch_size * patch_size {
        return Err(Error::Shape(format!(
            "{:?} is not a square patch grid for patch size {patch_size}",
            patches.shape()
        )));
    }
    let size = g * patch_size;
    let src = patches.data();
    let mut out = vec![T::zero(); 3 * size * size];
    for py in 0..g {
        for px in 0..g {
            let base = (py * g + px) * d;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let (y, x) = (py * patch_size + dy, px * patch_size + dx);
                    for c in 0..3 {
                        out[(c * size + y) * size + x] = src[base + (dy * patch_size + dx) * 3 + c];
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, size, size], out)
}

/// Joins a scope prefix and a parameter name.
pub(crate) fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fresh encoder parameters (truncated normal weights, zero biases).
pub fn init<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = config.width;
    let mut p = ParamSet::new();
    init_linear(&mut p, "patch_embed", config.patch_dim(), w, &mut rng)?;
    p.insert("cls_token", Tensor::new(vec![1, w], trunc_normal(&mut rng, w, INIT_STD))?)?;
    let rows = config.n_patches() + 1;
    p.insert("pos_embed", Tensor::new(vec![rows, w], trunc_normal(&mut rng, rows * w, INIT_STD))?)?;
    for i in 0..config.depth {
        init_block(&mut p, &format!("blocks.{i}"), w, &mut rng)?;
    }
    init_layer_norm(&mut p, "norm", w)?;
    Ok(p)
}

/// Number of learnable parameters, computed without allocation.
pub fn count_params(config: &EncoderConfig) -> u64 {
    let w = config.width as u64;
    let embed = config.patch_dim() as u64 * w + w;
    let tokens = w + (config.n_patches() as u64 + 1) * w;
    embed + tokens + config.depth as u64 * block_param_count(config.width) as u64 + 2 * w
}

/// Multiply-accumulate count of one forward pass at `image_size`, each
/// multiply-add counted once. Includes the quadratic attention terms;
/// normalization, activation and softmax arithmetic is excluded.
pub fn count_flops(config: &EncoderConfig, image_size: usize) -> Result<u64> {
    let c = config.at_image_size(image_size)?;
    let (n, w) = (c.n_patches() as u64, c.width as u64);
    let s = n + 1;
    let embed = n * c.patch_dim() as u64 * w;
    // q, k, v, o projections and the 4x MLP, then QK^T and AV
    let block = 4 * s * w * w + 8 * s * w * w + 2 * s * s * w;
    Ok(embed + c.depth as u64 * block)
}

/// Token sequence layout for a batch: per image, the classification token
/// followed by the kept patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub batch: usize,
    /// Sequence length per image, classification token included.
    pub seq: usize,
}

/// Builds the encoder over `patches` (`[batch * n_patches, patch_dim]`,
/// images stacked). With `visible`, only those patch indices of each image
/// enter the encoder; every image must keep the same count. Returns the
/// final-normalized tokens `[batch * seq, width]`.
pub fn encoder_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    config: &EncoderConfig,
    params: &'p ParamSet<T>,
    prefix: &str,
    patches: NodeId,
    batch: usize,
    visible: Option<&[Vec<usize>]>,
) -> Result<(NodeId, TokenLayout)> {
    let n = config.n_patches();
    let (rows, dim) = g.value(patches).matrix_dims();
    if rows != batch * n || dim != config.patch_dim() {
        return Err(Error::Shape(format!(
            "patch matrix [{rows}, {dim}] does not match batch {batch} of [{n}, {}]",
            config.patch_dim()
        )));
    }
    let keep: Vec<Vec<usize>> = match visible {
        Some(v) => {
            if v.len() != batch {
                return Err(Error::Shape(format!("{} visibility lists for batch {batch}", v.len())));
            }
            if v.iter().any(|l| l.len() != v[0].len() || l.is_empty() || l.iter().any(|&i| i >= n)) {
                return Err(Error::Shape("visible lists must be non-empty, equal length and in range".into()));
            }
            v.to_vec()
        }
        None => vec![(0..n).collect(); batch],
    };
    let kept = keep[0].len();
    let flat: Vec<usize> = keep.iter().enumerate().flat_map(|(b, l)| l.iter().map(move |&i| b * n + i)).collect();
    let pos_idx: Vec<usize> = keep.iter().flat_map(|l| l.iter().map(|&i| i + 1)).collect();

    let x = if kept == n && visible.is_none() { patches } else { g.gather_rows(patches, flat)? };
    let x = layers::linear(g, params, &scoped(prefix, "patch_embed"), x)?;
    let pos = g.param(params, &scoped(prefix, "pos_embed"))?;
    let pos_rows = g.gather_rows(pos, pos_idx)?;
    let x = g.add(x, pos_rows)?;
    let cls = g.param(params, &scoped(prefix, "cls_token"))?;
    let pos0 = g.gather_rows(pos, vec![0])?;
    let cls = g.add(cls, pos0)?;
    // Row 0 is the classification token, rows 1.. the kept patch tokens.
    let all = g.concat_rows(&[cls, x])?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| std::iter::once(0).chain((0..kept).map(move |j| 1 + b * kept + j)))
        .collect();
    let mut x = g.gather_rows(all, order)?;
    let seq = kept + 1;
    for i in 0..config.depth {
        x = layers::transformer_block(g, params, &scoped(prefix, &format!("blocks.{i}")), x, config.heads, seq)?;
    }
    let x = layers::layer_norm(g, params, &scoped(prefix, "norm"), x)?;
    Ok((x, TokenLayout { batch, seq }))
}

fn check_params<T: Scalar>(config: &EncoderConfig, params: &ParamSet<T>) -> Result<()> {
    let w = config.width;
    let expect = [
        ("patch_embed.w", vec![config.patch_dim(), w]),
        ("pos_embed", vec![config.n_patches() + 1, w]),
        ("cls_token", vec![1, w]),
    ];
    for (name, shape) in expect {
        let t = params.get(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("`{name}` is {:?}, config needs {shape:?}", t.shape())));
        }
    }
    if config.depth > 0 {
        params.get(&format!("blocks.{}.mlp.fc2.b", config.depth - 1))?;
    }
    if params.contains(&format!("blocks.{}.norm1.g", config.depth)) {
        return Err(Error::Shape(format!("parameters hold more than {} blocks", config.depth)));
    }
    Ok(())
}

/// Encodes a batch of `[3, H, W]` images in one graph.
pub fn encode_batch(config: &EncoderConfig, params: &ParamSet, images: &[Tensor]) -> Result<Vec<EncoderOutput>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    check_params(config, params)?;
    let mut rows = Vec::with_capacity(images.len() * config.n_patches() * config.patch_dim());
    for img in images {
        if img.shape() != [3, config.image_size, config.image_size] {
            return Err(Error::Shape(format!(
                "image {:?} does not match encoder input {}",
                img.shape(),
                config.image_size
            )));
        }
        rows.extend(patchify(img, config.patch_size)?.into_data());
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![images.len() * config.n_patches(), config.patch_dim()], rows)?);
    let (y, layout) = encoder_graph(&mut g, config, params, "", x, images.len(), None)?;
    let w = config.width;
    let out = g.value(y).data();
    Ok((0..layout.batch)
        .map(|b| {
            let base = b * layout.seq * w;
            EncoderOutput {
                cls_feature: Tensor::new(vec![w], out[base..base + w].to_vec()).unwrap(),
                patch_tokens: Tensor::new(vec![layout.seq - 1, w], out[base + w..base + layout.seq * w].to_vec()).unwrap(),
            }
        })
        .collect())
}

pub fn encode(config: &EncoderConfig, params: &ParamSet, image: &Tensor) -> Result<EncoderOutput> {
    Ok(encode_batch(config, params, std::slice::from_ref(image))?.remove(0))
}

/// Classification features for many images, in input order. Chunks are
/// evaluated in parallel when `parallel` is set; the result does not depend
/// on it.
pub fn cls_features(config: &EncoderConfig, params: &ParamSet, images: &[Tensor], chunk: usize, parallel: bool) -> Result<Vec<Tensor>> {
    let chunk = chunk.max(1);
    let run = |c: &[Tensor]| -> Result<Vec<Tensor>> {
        Ok(encode_batch(config, params, c)?.into_iter().map(|o| o.cls_feature).collect())
    };
    let parts: Vec<Result<Vec<Tensor>>> = if parallel {
        images.par_chunks(chunk).map(run).collect()
    } else {
        images.chunks(chunk).map(run).collect()
    };
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
