//! Parameter initialisation and the layer primitives models are built from.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

use super::{Graph, NodeId, ParamSet, Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Normal(0, std) samples truncated to ±2 std by rejection.
pub fn trunc_normal<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .collect()
}

pub fn init_linear<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.insert(
        format!("{name}.w"),
        Tensor::new(vec![fan_in, fan_out], trunc_normal(rng, fan_in * fan_out, INIT_STD))?,
    )?;
    params.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]))
}

pub fn init_layer_norm<T: Scalar>(params: &mut ParamSet<T>, name: &str, width: usize) -> Result<()> {
    params.insert(format!("{name}.g"), Tensor::full(vec![width], T::one()))?;
    params.insert(format!("{name}.b"), Tensor::zeros(vec![width]))
}

pub fn init_block<T: Scalar>(params: &mut ParamSet<T>, name: &str, width: usize, rng: &mut impl Rng) -> Result<()> {
    init_layer_norm(params, &format!("{name}.norm1"), width)?;
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{name}.attn.{proj}"), width, width, rng)?;
    }
    init_layer_norm(params, &format!("{name}.norm2"), width)?;
    init_linear(params, &format!("{name}.mlp.fc1"), width, 4 * width, rng)?;
    init_linear(params, &format!("{name}.mlp.fc2"), 4 * width, width, rng)
}

/// Parameters in one pre-norm transformer block of the given width.
pub const fn block_param_count(width: usize) -> usize {
    // two norms, four attention projections, 4x MLP
    4 * width + 4 * (width * width + width) + (width * 4 * width + 4 * width) + (4 * width * width + width)
}

pub fn linear<'p, T: Scalar>(g: &mut Graph<'p, T>, params: &'p ParamSet<T>, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm<'p, T: Scalar>(g: &mut Graph<'p, T>, params: &'p ParamSet<T>, name: &str, x: NodeId) -> Result<NodeId> {
    let gamma = g.param(params, &format!("{name}.g"))?;
    let beta = g.param(params, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Two-layer GELU MLP with 4x expansion.
pub fn mlp<'p, T: Scalar>(g: &mut Graph<'p, T>, params: &'p ParamSet<T>, name: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, params, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, params, &format!("{name}.fc2"), h)
}

/// Attention over already-projected `q`, `k`, `v`, concatenated across
/// heads and passed through the output projection `wo`, `bo`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    seq: usize,
    wo: NodeId,
    bo: NodeId,
) -> Result<NodeId> {
    let a = g.attention(q, k, v, heads, seq)?;
    g.linear(a, wo, Some(bo))
}

pub fn self_attention<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    params: &'p ParamSet<T>,
    name: &str,
    x: NodeId,
    heads: usize,
    seq: usize,
) -> Result<NodeId> {
    let q = linear(g, params, &format!("{name}.q"), x)?;
    let k = linear(g, params, &format!("{name}.k"), x)?;
    let v = linear(g, params, &format!("{name}.v"), x)?;
    let wo = g.param(params, &format!("{name}.o.w"))?;
    let bo = g.param(params, &format!("{name}.o.b"))?;
    multi_head_attention(g, q, k, v, heads, seq, wo, bo)
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn transformer_block<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    params: &'p ParamSet<T>,
    name: &str,
    x: NodeId,
    heads: usize,
    seq: usize,
) -> Result<NodeId> {
    let h = layer_norm(g, params, &format!("{name}.norm1"), x)?;
    let h = self_attention(g, params, &format!("{name}.attn"), h, heads, seq)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, params, &format!("{name}.norm2"), x)?;
    let h = mlp(g, params, &format!("{name}.mlp"), h)?;
    g.add(x, h)
}
