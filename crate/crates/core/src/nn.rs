//! Shared layers: linear maps, layer norm and pre-norm transformer blocks.

use rand::Rng;

use crate::autograd::{AttnMask, Var};
use crate::error::Result;
use crate::params::{Ctx, VerLMParams};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

pub fn init_linear<R: Rng + ?Sized>(
    p: &mut VerLMParams,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut R,
) -> Result<()> {
    p.insert(&format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
    p.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

pub fn linear(ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
    let w = ctx.p(&format!("{name}.w"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    let y = ctx.g.linear(x, w)?;
    ctx.g.add_row(y, b)
}

pub fn init_layer_norm(p: &mut VerLMParams, name: &str, d: usize) -> Result<()> {
    p.insert(&format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
    p.insert(&format!("{name}.bias"), Tensor::zeros(&[d]))
}

pub fn layer_norm(ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
    let gain = ctx.p(&format!("{name}.gain"))?;
    let bias = ctx.p(&format!("{name}.bias"))?;
    ctx.g.layer_norm(x, gain, bias)
}

/// Pre-norm block: `x + attn(ln1(x))` then `x + mlp(ln2(x))`.
pub fn init_block<R: Rng + ?Sized>(p: &mut VerLMParams, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    init_layer_norm(p, &format!("{prefix}.ln1"), d)?;
    init_linear(p, &format!("{prefix}.attn.wq"), d, d, INIT_STD, rng)?;
    // No key bias: it shifts every score in a row equally, so softmax ignores
    // it and its gradient is identically zero.
    p.insert(&format!("{prefix}.attn.wk.w"), Tensor::randn(&[d, d], INIT_STD, rng))?;
    init_linear(p, &format!("{prefix}.attn.wv"), d, d, INIT_STD, rng)?;
    init_linear(p, &format!("{prefix}.attn.wo"), d, d, INIT_STD, rng)?;
    init_layer_norm(p, &format!("{prefix}.ln2"), d)?;
    init_linear(p, &format!("{prefix}.mlp.fc"), d, 4 * d, INIT_STD, rng)?;
    init_linear(p, &format!("{prefix}.mlp.proj"), 4 * d, d, INIT_STD, rng)
}

pub fn block(ctx: &mut Ctx, prefix: &str, x: Var, heads: usize, mask: AttnMask) -> Result<Var> {
    let h = layer_norm(ctx, &format!("{prefix}.ln1"), x)?;
    let q = linear(ctx, &format!("{prefix}.attn.wq"), h)?;
    let wk = ctx.p(&format!("{prefix}.attn.wk.w"))?;
    let k = ctx.g.linear(h, wk)?;
    let v = linear(ctx, &format!("{prefix}.attn.wv"), h)?;
    let a = ctx.g.attention(q, k, v, heads, mask)?;
    let a = linear(ctx, &format!("{prefix}.attn.wo"), a)?;
    let x = ctx.g.add(x, a)?;
    let h = layer_norm(ctx, &format!("{prefix}.ln2"), x)?;
    let h = linear(ctx, &format!("{prefix}.mlp.fc"), h)?;
    let h = ctx.g.gelu(h);
    let h = linear(ctx, &format!("{prefix}.mlp.proj"), h)?;
    ctx.g.add(x, h)
}

/// A stack of `layers` blocks named `{prefix}.block{i}` followed by a final
/// layer norm `{prefix}.ln_f`.
pub fn init_stack<R: Rng + ?Sized>(
    p: &mut VerLMParams,
    prefix: &str,
    layers: usize,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    for i in 0..layers {
        init_block(p, &format!("{prefix}.block{i}"), d, rng)?;
    }
    init_layer_norm(p, &format!("{prefix}.ln_f"), d)
}

pub fn stack(ctx: &mut Ctx, prefix: &str, layers: usize, x: Var, heads: usize, mask: AttnMask) -> Result<Var> {
    let mut x = x;
    for i in 0..layers {
        x = block(ctx, &format!("{prefix}.block{i}"), x, heads, mask)?;
    }
    layer_norm(ctx, &format!("{prefix}.ln_f"), x)
}
