//! Face encoders: small feed-forward networks mapping attribute vectors to a
//! `[b, h]` embedding, pretrained on pair verification.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Ctx, Group, VerLMParams};
use crate::tensor::Tensor;
use crate::train::{cosine_warm_restarts_lr, Adam, TrainConfig};

/// Stand-in for a face image: an identity's attribute vector after
/// per-realization noise.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceAttr {
    pub identity_id: usize,
    pub attrs: Vec<f64>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// Shallow, tanh activations.
    A,
    /// Deeper, GELU activations.
    B,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::A => "a",
            EncoderKind::B => "b",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(EncoderKind::A),
            "b" | "B" => Ok(EncoderKind::B),
            _ => Err(Error::Config(format!("unknown encoder kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Output embedding width.
    pub h: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl EncoderSpec {
    pub fn variant(kind: EncoderKind, h: usize) -> Self {
        let layers = match kind {
            EncoderKind::A => 2,
            EncoderKind::B => 3,
        };
        Self {
            kind,
            h,
            layers,
            hidden: 64,
        }
    }

    fn widths(&self, attr_dim: usize) -> Vec<usize> {
        let mut w = vec![attr_dim];
        w.extend(std::iter::repeat_n(self.hidden, self.layers - 1));
        w.push(self.h);
        w
    }
}

pub fn init_encoder<R: Rng + ?Sized>(p: &mut VerLMParams, spec: &EncoderSpec, attr_dim: usize, rng: &mut R) -> Result<()> {
    if spec.layers == 0 || spec.h == 0 || spec.hidden == 0 || attr_dim == 0 {
        return Err(Error::Config("encoder extents must be positive".into()));
    }
    let w = spec.widths(attr_dim);
    for i in 0..spec.layers {
        let std = (1.0 / w[i] as f64).sqrt();
        nn::init_linear(p, &format!("encoder.l{i}"), w[i], w[i + 1], std, rng)?;
    }
    p.insert("encoder.verify.scale", Tensor::scalar(5.0))?;
    p.insert("encoder.verify.bias", Tensor::scalar(0.0))?;
    Ok(())
}

/// Encodes a batch of attribute vectors into `[b, h]`.
pub fn encode_face(ctx: &mut Ctx, spec: &EncoderSpec, faces: &[&[f64]]) -> Result<Var> {
    let expected = ctx.params().require("encoder.l0.w")?.shape()[0];
    if faces.is_empty() {
        return Err(Error::Input("encode_face needs at least one face".into()));
    }
    let mut data = Vec::with_capacity(faces.len() * expected);
    for f in faces {
        if f.len() != expected {
            return Err(Error::dim("encode_face", &[expected], &[f.len()]));
        }
        data.extend_from_slice(f);
    }
    let mut x = ctx.g.constant(&[faces.len(), expected], data)?;
    for i in 0..spec.layers {
        x = nn::linear(ctx, &format!("encoder.l{i}"), x)?;
        if i + 1 < spec.layers {
            x = match spec.kind {
                EncoderKind::A => ctx.g.tanh(x),
                EncoderKind::B => ctx.g.gelu(x),
            };
        }
    }
    Ok(x)
}

/// Same-identity logits `scale * cos(e_a, e_b) + bias`, shape `[b, 1]`.
pub fn verification_logits(ctx: &mut Ctx, spec: &EncoderSpec, a: &[&[f64]], b: &[&[f64]]) -> Result<Var> {
    let ea = encode_face(ctx, spec, a)?;
    let eb = encode_face(ctx, spec, b)?;
    let cos = ctx.g.cosine_rows(ea, eb)?;
    let scale = ctx.p("encoder.verify.scale")?;
    let bias = ctx.p("encoder.verify.bias")?;
    let z = ctx.g.mul_row(cos, scale)?;
    ctx.g.add_row(z, bias)
}

/// A labelled verification pair of face indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FacePair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// One positive and one negative partner per face, drawn with `rng`.
pub fn balanced_pairs<R: Rng + ?Sized>(faces: &[FaceAttr], rng: &mut R) -> Result<Vec<FacePair>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, f) in faces.iter().enumerate() {
        by_id.entry(f.identity_id).or_default().push(i);
    }
    if by_id.len() < 2 {
        return Err(Error::Input(format!(
            "verification pretraining needs at least 2 identities, got {}",
            by_id.len()
        )));
    }
    let mut pairs = Vec::with_capacity(2 * faces.len());
    for (i, f) in faces.iter().enumerate() {
        let same = &by_id[&f.identity_id];
        let others: Vec<usize> = same.iter().copied().filter(|&j| j != i).collect();
        let pos = others.choose(rng).copied().unwrap_or(i);
        pairs.push(FacePair { a: i, b: pos, same: true });
        let neg = loop {
            let j = rng.random_range(0..faces.len());
            if faces[j].identity_id != f.identity_id {
                break j;
            }
        };
        pairs.push(FacePair { a: i, b: neg, same: false });
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Trains the encoder group on balanced same/different pairs with a
/// logistic loss on scaled cosine similarity.
pub fn pretrain_encoder(
    params: &mut VerLMParams,
    spec: &EncoderSpec,
    faces: &[FaceAttr],
    cfg: &TrainConfig,
) -> Result<Vec<EncoderEpoch>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // validates the identity count even for a zero-epoch budget
    balanced_pairs(faces, &mut rng.clone())?;
    let saved: Vec<(Group, bool)> = Group::ALL.iter().map(|g| (*g, params.is_frozen(*g))).collect();
    for g in Group::ALL {
        params.set_frozen(g, g != Group::Encoder);
    }
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let pairs = balanced_pairs(faces, &mut rng)?;
        let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
        let mut total = 0.0;
        let mut lr = 0.0;
        for chunk in pairs.chunks(cfg.batch_size) {
            let a: Vec<&[f64]> = chunk.iter().map(|p| faces[p.a].attrs.as_slice()).collect();
            let b: Vec<&[f64]> = chunk.iter().map(|p| faces[p.b].attrs.as_slice()).collect();
            let labels: Vec<f64> = chunk.iter().map(|p| f64::from(u8::from(p.same))).collect();
            let grads = {
                let mut ctx = Ctx::new(params, true);
                let z = verification_logits(&mut ctx, spec, &a, &b)?;
                let loss = ctx.g.bce_with_logits(z, &labels)?;
                total += ctx.g.value(loss)[0] * chunk.len() as f64;
                ctx.backward(loss)?
            };
            params.accumulate(&grads)?;
            lr = cosine_warm_restarts_lr(step, cfg, steps_per_epoch);
            adam.step(params, lr)?;
            step += 1;
        }
        log.push(EncoderEpoch {
            epoch: epoch + 1,
            loss: total / pairs.len() as f64,
            lr,
        });
    }
    for (g, f) in saved {
        params.set_frozen(g, f);
    }
    Ok(log)
}

/// Fraction of pairs whose logit sign matches the label.
pub fn pair_accuracy(params: &VerLMParams, spec: &EncoderSpec, faces: &[FaceAttr], pairs: &[FacePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs to score".into()));
    }
    let mut ctx = Ctx::new(params, false);
    let a: Vec<&[f64]> = pairs.iter().map(|p| faces[p.a].attrs.as_slice()).collect();
    let b: Vec<&[f64]> = pairs.iter().map(|p| faces[p.b].attrs.as_slice()).collect();
    let z = verification_logits(&mut ctx, spec, &a, &b)?;
    let correct = ctx
        .g
        .value(z)
        .iter()
        .zip(pairs)
        .filter(|(z, p)| (**z > 0.0) == p.same)
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Cosine similarity of two embeddings.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Embeddings for a list of faces, one row each.
pub fn embed_all(params: &VerLMParams, spec: &EncoderSpec, faces: &[FaceAttr]) -> Result<Vec<Vec<f64>>> {
    let mut ctx = Ctx::new(params, false);
    let refs: Vec<&[f64]> = faces.iter().map(|f| f.attrs.as_slice()).collect();
    let e = encode_face(&mut ctx, spec, &refs)?;
    Ok(ctx.g.value(e).chunks(spec.h).map(<[f64]>::to_vec).collect())
}
