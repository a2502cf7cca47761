//! The assembled model: face encoder, mapper and decoder behind one config.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::check_gradients;
use crate::autograd::{GradCheckOptions, GradCheckReport, LossParts, Var};
use crate::decoder::{self, count_tokens, pad_batch};
use crate::encoder::{self, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::mapper::{self, FusionConfig, ModelDims, PrefixBundle};
use crate::params::{Ctx, Group, VerLMParams};
use crate::tensor::Tensor;
use crate::text::EOS;
use crate::train::{diversity_loss, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub fusion: FusionConfig,
    pub encoder: EncoderSpec,
    /// Length of a face attribute vector.
    pub attr_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            dims,
            fusion: FusionConfig::default(),
            encoder: EncoderSpec::variant(EncoderKind::A, dims.h),
            attr_dim: crate::data::ATTR_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.fusion.validate()?;
        if self.encoder.h != self.dims.h {
            return Err(Error::Config(format!(
                "encoder width {} does not match h={}",
                self.encoder.h, self.dims.h
            )));
        }
        if self.attr_dim == 0 {
            return Err(Error::Config("attr_dim must be positive".into()));
        }
        Ok(())
    }
}

/// One training or evaluation example, already tokenized. `target` holds
/// the description ids without the trailing EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub face_a: Vec<f64>,
    pub face_b: Vec<f64>,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    /// The same example with the two faces exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            face_a: self.face_b.clone(),
            face_b: self.face_a.clone(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerLM {
    pub config: ModelConfig,
    pub params: VerLMParams,
}

/// Encodes both faces and runs the mapper.
pub fn build_prefix(ctx: &mut Ctx, config: &ModelConfig, batch: &[&Example]) -> Result<PrefixBundle> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let a: Vec<&[f64]> = batch.iter().map(|e| e.face_a.as_slice()).collect();
    let b: Vec<&[f64]> = batch.iter().map(|e| e.face_b.as_slice()).collect();
    let e1 = encoder::encode_face(ctx, &config.encoder, &a)?;
    let e2 = encoder::encode_face(ctx, &config.encoder, &b)?;
    let prompts: Vec<Vec<usize>> = batch.iter().map(|e| e.prompt.clone()).collect();
    mapper::build_prefix(ctx, &config.dims, &config.fusion, e1, e2, &prompts)
}

/// Padded targets with EOS appended, one row per example.
pub fn batch_targets(batch: &[&Example]) -> Vec<Vec<usize>> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|e| e.target.clone()).collect();
    pad_batch(&decoder::with_eos(&seqs))
}

/// Teacher-forced loss on description tokens (plus EOS). Returns the loss
/// node, its parts and the number of supervised tokens.
pub fn batch_loss(ctx: &mut Ctx, config: &ModelConfig, batch: &[&Example], loss_cfg: &LossConfig) -> Result<(Var, LossParts, usize)> {
    let prefix = build_prefix(ctx, config, batch)?;
    let targets = batch_targets(batch);
    let logits = decoder::decode_logits(ctx, &config.dims, Some(prefix.fused), &targets)?;
    let (loss, parts) = diversity_loss(&mut ctx.g, logits, &targets, loss_cfg)?;
    Ok((loss, parts, count_tokens(&targets)))
}

impl VerLM {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        // One stream per component, so e.g. the decoder's init does not
        // depend on the mapper's shape.
        let stream = |i: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            rng
        };
        let mut params = VerLMParams::new();
        encoder::init_encoder(&mut params, &config.encoder, config.attr_dim, &mut stream(1))?;
        mapper::init_mapper(&mut params, &config.dims, &config.fusion, &mut stream(2))?;
        decoder::init_decoder(&mut params, &config.dims, &mut stream(3))?;
        let mut model = Self { config, params };
        model.sync_text_embed()?;
        Ok(model)
    }

    /// Copies the decoder's token and position tables into the prompt
    /// embedder, so prompts start out in the language model's space.
    pub fn sync_text_embed(&mut self) -> Result<()> {
        let mut tokens = self.params.require("decoder.tokens")?.clone();
        let mut pos = self.params.require("decoder.pos")?.clone();
        tokens.zero_grad();
        pos.zero_grad();
        self.params.insert("text_embed.tokens", tokens)?;
        self.params.insert("text_embed.pos", pos)
    }

    pub fn prefix_len(&self) -> usize {
        self.config.dims.prefix_len(&self.config.fusion)
    }

    /// Prefix values `[b, L, d]` without gradient tracking.
    pub fn prefix_tensor(&self, batch: &[&Example]) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.params, false);
        let p = build_prefix(&mut ctx, &self.config, batch)?;
        Ok(ctx.g.to_tensor(p.fused))
    }

    /// Token-weighted teacher-forced cross-entropy and entropy over a set.
    pub fn eval_loss(&self, examples: &[Example], loss_cfg: &LossConfig, batch_size: usize) -> Result<LossParts> {
        if examples.is_empty() {
            return Err(Error::Input("no examples to evaluate".into()));
        }
        let (mut loss, mut ce, mut ent, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut ctx = Ctx::new(&self.params, false);
            let (_, parts, tokens) = batch_loss(&mut ctx, &self.config, &refs, loss_cfg)?;
            let w = tokens as f64;
            loss += parts.loss * w;
            ce += parts.ce * w;
            ent += parts.entropy * w;
            n += tokens;
        }
        let w = n as f64;
        Ok(LossParts {
            loss: loss / w,
            ce: ce / w,
            entropy: ent / w,
        })
    }

    /// Greedy descriptions for each example, EOS stripped.
    pub fn generate(&self, examples: &[Example], max_new: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let prefix = self.prefix_tensor(&refs)?;
            for mut ids in decoder::generate_batch(&self.params, &self.config.dims, &prefix, max_new)? {
                if ids.last() == Some(&EOS) {
                    ids.pop();
                }
                out.push(ids);
            }
        }
        Ok(out)
    }

    /// Checks the end-to-end loss gradient for every parameter of each
    /// group against central differences. One report per group.
    pub fn grad_check_groups(
        &self,
        examples: &[Example],
        loss_cfg: &LossConfig,
        opts: GradCheckOptions,
    ) -> Result<Vec<GradCheckReport>> {
        let refs: Vec<&Example> = examples.iter().collect();
        let mut open = self.params.clone();
        open.unfreeze_all();
        let grads = {
            let mut ctx = Ctx::new(&open, true);
            let (loss, _, _) = batch_loss(&mut ctx, &self.config, &refs, loss_cfg)?;
            ctx.backward(loss)?
        };
        let mut reports = Vec::new();
        for group in Group::ALL {
            let names: Vec<String> = open
                .group(group)
                .map(|g| g.iter().map(|(n, _)| n.to_string()).collect())
                .unwrap_or_default();
            if names.is_empty() {
                continue;
            }
            let tensors: Vec<Tensor> = names.iter().map(|n| open.require(n).cloned()).collect::<Result<_>>()?;
            let analytic: Vec<Vec<f64>> = names
                .iter()
                .zip(&tensors)
                .map(|(n, t)| {
                    grads
                        .iter()
                        .find(|(g, _)| g == n)
                        .map_or_else(|| vec![0.0; t.len()], |(_, v)| v.clone())
                })
                .collect();
            let mut work = open.clone();
            let report = check_gradients(&format!("model/{group}"), &tensors, &analytic, opts, |ts| {
                for (n, t) in names.iter().zip(ts) {
                    *work.get_mut(n).expect("name taken from params") = t.clone();
                }
                let mut ctx = Ctx::new(&work, false);
                let (loss, _, _) = batch_loss(&mut ctx, &self.config, &refs, loss_cfg)?;
                Ok(ctx.g.value(loss)[0])
            })?;
            reports.push(report);
        }
        Ok(reports)
    }
}
