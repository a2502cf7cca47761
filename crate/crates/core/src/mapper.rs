//! Projection and fusion layers that turn two face embeddings and a prompt
//! into the decoder prefix.
//!
//! Each projection appends `c` learnable constant tokens, runs a
//! bidirectional transformer, and clips the constants off again.

use rand::Rng;

use crate::autograd::{AttnMask, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Ctx, VerLMParams};
use crate::tensor::Tensor;
use crate::text::EOS;

/// Shape symbols for the whole model. The batch extent is taken from the
/// inputs at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Face embedding width.
    pub h: usize,
    /// Latent tokens per image.
    pub s: usize,
    /// Learnable constant tokens per projection.
    pub c: usize,
    /// Prompt length.
    pub t: usize,
    /// Decoder width.
    pub d: usize,
    pub vocab: usize,
    pub heads: usize,
    pub proj_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            h: 32,
            s: 8,
            c: 8,
            t: crate::text::PROMPT_LEN,
            d: 64,
            vocab: 256,
            heads: 4,
            proj_layers: 2,
            fusion_layers: 2,
            decoder_layers: 2,
            max_len: 256,
        }
    }
}

impl ModelDims {
    /// Expanded width of the image projection, `s * d`.
    pub fn k(&self) -> usize {
        self.s * self.d
    }

    /// Prefix length seen by the decoder.
    pub fn prefix_len(&self, fusion: &FusionConfig) -> usize {
        let img = match fusion.clip {
            ClipMode::KeepContent => self.s,
            ClipMode::KeepConstants => self.c,
        };
        let txt = if !fusion.use_text_projection {
            self.t
        } else {
            match fusion.clip {
                ClipMode::KeepContent => self.t,
                ClipMode::KeepConstants => self.c,
            }
        };
        if !fusion.use_cross_projection {
            return 2 * img + txt;
        }
        let content = 2 * img + txt + usize::from(fusion.use_sep);
        match fusion.clip {
            ClipMode::KeepContent => content,
            ClipMode::KeepConstants => self.c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("h", self.h),
            ("s", self.s),
            ("c", self.c),
            ("t", self.t),
            ("d", self.d),
            ("vocab", self.vocab),
            ("heads", self.heads),
            ("proj_layers", self.proj_layers),
            ("fusion_layers", self.fusion_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dimension {name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.vocab <= EOS {
            return Err(Error::Config("vocab must include the special tokens".into()));
        }
        Ok(())
    }
}

/// Which positions survive a projection transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipMode {
    /// Drop the constants, keep the content positions.
    #[default]
    KeepContent,
    /// Keep only the constant positions (prefix-mapper convention).
    KeepConstants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub use_sep: bool,
    pub use_cross_projection: bool,
    pub use_text_projection: bool,
    pub clip: ClipMode,
    /// Both images go through one set of image projection weights.
    pub share_image_projection: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            use_sep: true,
            use_cross_projection: true,
            use_text_projection: true,
            clip: ClipMode::KeepContent,
            share_image_projection: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_sep && !self.use_cross_projection {
            return Err(Error::Config("use_sep requires use_cross_projection".into()));
        }
        Ok(())
    }
}

/// Intermediate and final prefix tensors.
#[derive(Debug, Clone, Copy)]
pub struct PrefixBundle {
    pub img1_tokens: Var,
    pub img2_tokens: Var,
    /// `[b, 1, d]` separator rows when enabled.
    pub sep: Option<Var>,
    pub text_tokens: Var,
    pub fused: Var,
}

pub(crate) fn image_proj_name(fusion: &FusionConfig, which: usize) -> &'static str {
    if which == 1 && !fusion.share_image_projection {
        "image_proj.second"
    } else {
        "image_proj.first"
    }
}

fn init_projection<R: Rng + ?Sized>(p: &mut VerLMParams, prefix: &str, dims: &ModelDims, layers: usize, rng: &mut R) -> Result<()> {
    p.insert(&format!("{prefix}.consts"), Tensor::randn(&[dims.c, dims.d], nn::INIT_STD, rng))?;
    nn::init_stack(p, &format!("{prefix}.tf"), layers, dims.d, rng)
}

/// Creates every mapper parameter the fusion config can reach.
pub fn init_mapper<R: Rng + ?Sized>(p: &mut VerLMParams, dims: &ModelDims, fusion: &FusionConfig, rng: &mut R) -> Result<()> {
    dims.validate()?;
    fusion.validate()?;
    let images = if fusion.share_image_projection { 1 } else { 2 };
    for which in 0..images {
        let name = image_proj_name(fusion, which);
        nn::init_linear(p, &format!("{name}.expand"), dims.h, dims.k(), nn::INIT_STD, rng)?;
        init_projection(p, name, dims, dims.proj_layers, rng)?;
    }
    if fusion.use_text_projection {
        init_projection(p, "text_proj", dims, dims.proj_layers, rng)?;
    }
    if fusion.use_cross_projection {
        init_projection(p, "cross_proj", dims, dims.fusion_layers, rng)?;
    }
    Ok(())
}

/// Appends constants, runs the named transformer, clips.
fn project(ctx: &mut Ctx, prefix: &str, dims: &ModelDims, layers: usize, clip: ClipMode, x: Var) -> Result<Var> {
    let shape = ctx.g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != dims.d {
        return Err(Error::dim("projection", &shape, &[0, 0, dims.d]));
    }
    let (b, n) = (shape[0], shape[1]);
    let consts = ctx.p(&format!("{prefix}.consts"))?;
    let consts = ctx.g.expand(consts, b);
    let joined = ctx.g.concat_seq(&[x, consts])?;
    let y = nn::stack(ctx, &format!("{prefix}.tf"), layers, joined, dims.heads, AttnMask::Full)?;
    match clip {
        ClipMode::KeepContent => ctx.g.slice_seq(y, 0, n),
        ClipMode::KeepConstants => ctx.g.slice_seq(y, n, dims.c),
    }
}

/// `[b, h]` face embedding to `[b, s, d]` latent tokens.
pub fn image_projection(ctx: &mut Ctx, dims: &ModelDims, fusion: &FusionConfig, which: usize, e: Var) -> Result<Var> {
    let shape = ctx.g.shape(e).to_vec();
    if shape.len() != 2 || shape[1] != dims.h {
        return Err(Error::dim("image_projection", &shape, &[0, dims.h]));
    }
    let name = image_proj_name(fusion, which);
    let wide = nn::linear(ctx, &format!("{name}.expand"), e)?;
    let tokens = ctx.g.reshape(wide, &[shape[0], dims.s, dims.d])?;
    project(ctx, name, dims, dims.proj_layers, fusion.clip, tokens)
}

/// Shape-preserving `[b, t, d]` prompt projection.
pub fn text_projection(ctx: &mut Ctx, dims: &ModelDims, clip: ClipMode, x: Var) -> Result<Var> {
    project(ctx, "text_proj", dims, dims.proj_layers, clip, x)
}

/// The decoder's EOS embedding row, repeated to `[b, 1, d]`.
pub fn separator(ctx: &mut Ctx, b: usize) -> Result<Var> {
    let table = ctx.p("decoder.tokens")?;
    let rows = ctx.g.gather(table, &vec![EOS; b])?;
    let d = ctx.g.shape(rows)[1];
    ctx.g.reshape(rows, &[b, 1, d])
}

/// Fuses `[p1; SEP; p2; txt]` (SEP optional) through the cross transformer.
pub fn cross_projection(
    ctx: &mut Ctx,
    dims: &ModelDims,
    clip: ClipMode,
    p1: Var,
    p2: Var,
    txt: Var,
    sep: Option<Var>,
) -> Result<Var> {
    let mut parts = vec![p1];
    parts.extend(sep);
    parts.push(p2);
    parts.push(txt);
    let joined = ctx.g.concat_seq(&parts)?;
    project(ctx, "cross_proj", dims, dims.fusion_layers, clip, joined)
}

/// Plain `[p1; p2; txt]` with no separator and no fusion layers.
pub fn naive_concat_prefix(ctx: &mut Ctx, p1: Var, p2: Var, txt: Var) -> Result<Var> {
    ctx.g.concat_seq(&[p1, p2, txt])
}

/// Prompt embedding from the text-embed tables, `[b, t, d]`.
pub fn embed_prompt(ctx: &mut Ctx, prompts: &[Vec<usize>]) -> Result<Var> {
    let table = ctx.p("text_embed.tokens")?;
    let pos = ctx.p("text_embed.pos")?;
    crate::text::embed_text(&mut ctx.g, table, pos, prompts)
}

/// Runs the whole mapper on encoded faces `e1`, `e2` (`[b, h]`) and
/// prompt ids.
pub fn build_prefix(
    ctx: &mut Ctx,
    dims: &ModelDims,
    fusion: &FusionConfig,
    e1: Var,
    e2: Var,
    prompts: &[Vec<usize>],
) -> Result<PrefixBundle> {
    fusion.validate()?;
    let img1_tokens = image_projection(ctx, dims, fusion, 0, e1)?;
    let img2_tokens = image_projection(ctx, dims, fusion, 1, e2)?;
    let raw = embed_prompt(ctx, prompts)?;
    let text_tokens = if fusion.use_text_projection {
        text_projection(ctx, dims, fusion.clip, raw)?
    } else {
        raw
    };
    let b = ctx.g.shape(e1)[0];
    let sep = if fusion.use_sep { Some(separator(ctx, b)?) } else { None };
    let fused = if fusion.use_cross_projection {
        cross_projection(ctx, dims, fusion.clip, img1_tokens, img2_tokens, text_tokens, sep)?
    } else {
        naive_concat_prefix(ctx, img1_tokens, img2_tokens, text_tokens)?
    };
    Ok(PrefixBundle {
        img1_tokens,
        img2_tokens,
        sep,
        text_tokens,
        fused,
    })
}
