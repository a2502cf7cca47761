//! Decoder-only language model over a continuous prefix.
//!
//! Prefix rows take positions `0..L` and text continues at `L..L+T` in the
//! same positional table. The output head is tied to the token table.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttnMask, Var};
use crate::error::{Error, Result};
use crate::mapper::ModelDims;
use crate::nn;
use crate::params::{Ctx, Group, VerLMParams};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS, PAD};
use crate::train::{cosine_warm_restarts_lr, diversity_loss, Adam, EpochLog, LossConfig, TrainConfig};

pub fn init_decoder<R: Rng + ?Sized>(p: &mut VerLMParams, dims: &ModelDims, rng: &mut R) -> Result<()> {
    dims.validate()?;
    p.insert("decoder.tokens", Tensor::randn(&[dims.vocab, dims.d], nn::INIT_STD, rng))?;
    p.insert("decoder.pos", Tensor::randn(&[dims.max_len, dims.d], nn::INIT_STD, rng))?;
    nn::init_stack(p, "decoder.tf", dims.decoder_layers, dims.d, rng)
}

/// Decoder inputs for teacher forcing: `[BOS] + targets[..T-1]`.
pub fn shift_right(targets: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(targets.len());
    if !targets.is_empty() {
        v.push(BOS);
        v.extend_from_slice(&targets[..targets.len() - 1]);
    }
    v
}

/// Pads every sequence to the longest one with PAD.
pub fn pad_batch(seqs: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut v = s.clone();
            v.resize(t, PAD);
            v
        })
        .collect()
}

/// Hidden states for `inputs` after an optional `[b, L, d]` prefix, before
/// the output head. Returns `[b, T, d]` for the text positions.
fn hidden(ctx: &mut Ctx, dims: &ModelDims, prefix: Option<Var>, inputs: &[Vec<usize>]) -> Result<Var> {
    let b = inputs.len();
    let t = inputs.first().map_or(0, Vec::len);
    if b == 0 || t == 0 || inputs.iter().any(|s| s.len() != t) {
        return Err(Error::Input("decoder needs a non-empty batch of equal-length sequences".into()));
    }
    let l = match prefix {
        Some(p) => {
            let s = ctx.g.shape(p);
            if s.len() != 3 || s[0] != b || s[2] != dims.d {
                return Err(Error::dim("decoder prefix", s, &[b, 0, dims.d]));
            }
            s[1]
        }
        None => 0,
    };
    if l + t > dims.max_len {
        return Err(Error::Contract(format!(
            "prefix {l} + text {t} exceeds decoder max_len {}",
            dims.max_len
        )));
    }
    let table = ctx.p("decoder.tokens")?;
    let pos = ctx.p("decoder.pos")?;
    let ids: Vec<usize> = inputs.iter().flatten().copied().collect();
    let tok = ctx.g.gather(table, &ids)?;
    let tok = ctx.g.reshape(tok, &[b, t, dims.d])?;
    let text_pos: Vec<usize> = (l..l + t).collect();
    let text_pos = ctx.g.gather(pos, &text_pos)?;
    let text_pos = ctx.g.expand(text_pos, b);
    let text = ctx.g.add(tok, text_pos)?;
    let x = match prefix {
        Some(p) => {
            let prefix_pos: Vec<usize> = (0..l).collect();
            let prefix_pos = ctx.g.gather(pos, &prefix_pos)?;
            let prefix_pos = ctx.g.expand(prefix_pos, b);
            let p = ctx.g.add(p, prefix_pos)?;
            ctx.g.concat_seq(&[p, text])?
        }
        None => text,
    };
    let y = nn::stack(ctx, "decoder.tf", dims.decoder_layers, x, dims.heads, AttnMask::Causal { prefix: l })?;
    if l == 0 {
        Ok(y)
    } else {
        ctx.g.slice_seq(y, l, t)
    }
}

fn head(ctx: &mut Ctx, h: Var) -> Result<Var> {
    let table = ctx.p("decoder.tokens")?;
    let tt = ctx.g.transpose(table)?;
    ctx.g.linear(h, tt)
}

/// Logits `[b, T, V]` at every input position.
pub fn forward_inputs(ctx: &mut Ctx, dims: &ModelDims, prefix: Option<Var>, inputs: &[Vec<usize>]) -> Result<Var> {
    let h = hidden(ctx, dims, prefix, inputs)?;
    head(ctx, h)
}

/// Teacher-forced logits `[b, T, V]`; step `j` predicts `targets[j]` from
/// the prefix and `targets[..j]`.
pub fn decode_logits(ctx: &mut Ctx, dims: &ModelDims, prefix: Option<Var>, targets: &[Vec<usize>]) -> Result<Var> {
    let inputs: Vec<Vec<usize>> = targets.iter().map(|t| shift_right(t)).collect();
    forward_inputs(ctx, dims, prefix, &inputs)
}

/// Logits `[b, 1, V]` for the token after the last input position.
pub fn next_token_logits(ctx: &mut Ctx, dims: &ModelDims, prefix: Option<Var>, inputs: &[Vec<usize>]) -> Result<Var> {
    let h = hidden(ctx, dims, prefix, inputs)?;
    let t = ctx.g.shape(h)[1];
    let last = ctx.g.slice_seq(h, t - 1, 1)?;
    head(ctx, last)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for a batch. `step` gets the current inputs (BOS plus
/// tokens emitted so far, equal length across the batch) and returns
/// next-token logits per row. Each output ends at its first EOS (kept) or
/// after `max_new` tokens.
pub fn greedy_decode<F>(batch: usize, max_new: usize, mut step: F) -> Result<Vec<Vec<usize>>>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    let mut inputs = vec![vec![BOS]; batch];
    let mut out = vec![Vec::new(); batch];
    let mut done = vec![false; batch];
    for _ in 0..max_new {
        if done.iter().all(|d| *d) {
            break;
        }
        let logits = step(&inputs)?;
        if logits.len() != batch {
            return Err(Error::dim("greedy_decode", &[batch], &[logits.len()]));
        }
        for (i, row) in logits.iter().enumerate() {
            // finished rows keep extending with PAD so the batch stays rectangular
            let next = if done[i] { PAD } else { argmax(row) };
            if !done[i] {
                out[i].push(next);
                done[i] = next == EOS;
            }
            inputs[i].push(next);
        }
    }
    Ok(out)
}

/// Single-example greedy generation from a `[1, L, d]` prefix.
pub fn generate(params: &VerLMParams, dims: &ModelDims, prefix: &Tensor, max_new: usize) -> Result<Vec<usize>> {
    let prefix = prefix.clone().reshape(&[1, prefix.len() / dims.d, dims.d])?;
    Ok(generate_batch(params, dims, &prefix, max_new)?.remove(0))
}

/// Greedy generation for each row of a `[b, L, d]` prefix. Rows do not
/// interact, so this matches per-row generation.
pub fn generate_batch(params: &VerLMParams, dims: &ModelDims, prefix: &Tensor, max_new: usize) -> Result<Vec<Vec<usize>>> {
    let shape = prefix.shape();
    if shape.len() != 3 || shape[2] != dims.d {
        return Err(Error::dim("generate", shape, &[0, 0, dims.d]));
    }
    let (b, l) = (shape[0], shape[1]);
    let budget = max_new.min(dims.max_len.saturating_sub(l));
    greedy_decode(b, budget, |inputs| {
        let mut ctx = Ctx::new(params, false);
        let p = ctx.g.leaf_with(prefix, false);
        let logits = next_token_logits(&mut ctx, dims, Some(p), inputs)?;
        Ok(ctx.g.value(logits).chunks(dims.vocab).map(<[f64]>::to_vec).collect())
    })
}

/// Appends EOS to each sequence.
pub fn with_eos(seqs: &[Vec<usize>]) -> Vec<Vec<usize>> {
    seqs.iter()
        .map(|s| {
            let mut v = s.clone();
            v.push(EOS);
            v
        })
        .collect()
}

/// Next-token pretraining on plain text, no prefix. Trains the decoder
/// group only; other groups' freeze flags are restored afterwards.
pub fn lm_pretrain(params: &mut VerLMParams, dims: &ModelDims, corpus: &[Vec<usize>], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("language model corpus is empty".into()));
    }
    let seqs = with_eos(corpus);
    let saved: Vec<(Group, bool)> = Group::ALL.iter().map(|g| (*g, params.is_frozen(*g))).collect();
    for g in Group::ALL {
        params.set_frozen(g, g != Group::Decoder);
    }
    let loss_cfg = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let steps_per_epoch = seqs.len().div_ceil(cfg.batch_size);
    let mut adam = Adam::new();
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let targets = pad_batch(&batch);
            let grads = {
                let mut ctx = Ctx::new(params, true);
                let logits = decode_logits(&mut ctx, dims, None, &targets)?;
                let (loss, parts) = diversity_loss(&mut ctx.g, logits, &targets, &loss_cfg)?;
                acc.add(&parts, count_tokens(&targets));
                ctx.backward(loss)?
            };
            params.accumulate(&grads)?;
            let lr = cosine_warm_restarts_lr(step, cfg, steps_per_epoch);
            acc.lr = acc.lr.max(lr);
            adam.step(params, lr)?;
            step += 1;
        }
        log.push(acc.finish(epoch + 1, cfg.stage));
    }
    for (g, f) in saved {
        params.set_frozen(g, f);
    }
    Ok(log)
}

/// Token-weighted mean next-token cross-entropy over a corpus.
pub fn lm_cross_entropy(params: &VerLMParams, dims: &ModelDims, corpus: &[Vec<usize>], batch_size: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Input("language model corpus is empty".into()));
    }
    let seqs = with_eos(corpus);
    let loss_cfg = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let targets = pad_batch(chunk);
        let mut ctx = Ctx::new(params, false);
        let logits = decode_logits(&mut ctx, dims, None, &targets)?;
        let (_, parts) = diversity_loss(&mut ctx.g, logits, &targets, &loss_cfg)?;
        let n = count_tokens(&targets);
        total += parts.ce * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

pub(crate) fn count_tokens(targets: &[Vec<usize>]) -> usize {
    targets.iter().flatten().filter(|&&t| t != PAD).count()
}

/// Token-weighted running means for one epoch.
#[derive(Debug, Default)]
pub(crate) struct EpochAccumulator {
    loss: f64,
    ce: f64,
    entropy: f64,
    tokens: usize,
    pub lr: f64,
}

impl EpochAccumulator {
    pub fn add(&mut self, parts: &crate::autograd::LossParts, tokens: usize) {
        let w = tokens as f64;
        self.loss += parts.loss * w;
        self.ce += parts.ce * w;
        self.entropy += parts.entropy * w;
        self.tokens += tokens;
    }

    pub fn finish(&self, epoch: usize, stage: crate::train::Stage) -> EpochLog {
        let n = self.tokens.max(1) as f64;
        EpochLog {
            epoch,
            stage,
            loss: self.loss / n,
            ce: self.ce / n,
            entropy: self.entropy / n,
            lr: self.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::GradCheckOptions;
    use crate::autograd::gradcheck::check_gradients;
    use crate::train::Stage;

    fn dims(layers: usize) -> ModelDims {
        ModelDims {
            d: 16,
            vocab: 50,
            heads: 2,
            decoder_layers: layers,
            max_len: 32,
            ..ModelDims::default()
        }
    }

    fn params(dims: &ModelDims, seed: u64) -> VerLMParams {
        let mut p = VerLMParams::new();
        init_decoder(&mut p, dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        p
    }

    fn logits(p: &VerLMParams, dims: &ModelDims, prefix: Option<&Tensor>, targets: &[Vec<usize>]) -> Tensor {
        let mut ctx = Ctx::new(p, false);
        let pv = prefix.map(|t| ctx.g.leaf_with(t, false));
        let y = decode_logits(&mut ctx, dims, pv, targets).unwrap();
        ctx.g.to_tensor(y)
    }

    #[test]
    fn output_shape() {
        let dims = dims(2);
        let p = params(&dims, 1);
        let prefix = Tensor::randn(&[2, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = logits(&p, &dims, Some(&prefix), &[vec![4, 5, 6, 7, 8, 9], vec![9, 8, 7, 6, 5, 4]]);
        assert_eq!(y.shape(), &[2, 6, 50]);
    }

    #[test]
    fn causality_for_every_depth() {
        for layers in [2, 4, 8, 16] {
            let dims = dims(layers);
            let p = params(&dims, layers as u64);
            let prefix = Tensor::randn(&[1, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
            let base = vec![4, 5, 6, 7, 8, 9];
            let y0 = logits(&p, &dims, Some(&prefix), &[base.clone()]);
            for j in 0..base.len() {
                let mut pert = base.clone();
                pert[j] = 30;
                let y1 = logits(&p, &dims, Some(&prefix), &[pert]);
                // step j sees targets[..j], so steps <= j are untouched
                let keep = (j + 1) * 50;
                assert_eq!(&y0.data()[..keep], &y1.data()[..keep], "layers {layers} j {j}");
                if j + 1 < base.len() {
                    assert_ne!(&y0.data()[keep..], &y1.data()[keep..]);
                }
            }
        }
    }

    #[test]
    fn batch_matches_stacked_single_examples() {
        let dims = dims(2);
        let p = params(&dims, 4);
        let prefix = Tensor::randn(&[2, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let targets = vec![vec![4, 5, 6, 7], vec![10, 11, 12, 13]];
        let both = logits(&p, &dims, Some(&prefix), &targets);
        for i in 0..2 {
            let one = Tensor::new(vec![1, 3, 16], prefix.data()[i * 48..(i + 1) * 48].to_vec()).unwrap();
            let y = logits(&p, &dims, Some(&one), &targets[i..=i]);
            let got = &both.data()[i * 200..(i + 1) * 200];
            for (a, b) in got.iter().zip(y.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn length_overflow_is_contract_error() {
        let dims = dims(1);
        let p = params(&dims, 6);
        let prefix = Tensor::zeros(&[1, 30, 16]);
        let mut ctx = Ctx::new(&p, false);
        let pv = ctx.g.leaf_with(&prefix, false);
        assert!(matches!(
            decode_logits(&mut ctx, &dims, Some(pv), &[vec![4, 5, 6]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ce_gradient_wrt_prefix_matches_differences() {
        let dims = dims(2);
        let p = params(&dims, 7);
        let prefix = Tensor::randn(&[1, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let targets = vec![vec![4, 5, 6, EOS]];
        let eval = |x: &Tensor, track: bool| -> Result<(f64, Vec<f64>)> {
            let mut ctx = Ctx::new(&p, false);
            let pv = ctx.g.leaf_with(x, track);
            let y = decode_logits(&mut ctx, &dims, Some(pv), &targets)?;
            let (loss, _) = diversity_loss(&mut ctx.g, y, &targets, &LossConfig::default())?;
            let v = ctx.g.value(loss)[0];
            let g = if track { ctx.g.backward(loss)?.get(pv).unwrap().to_vec() } else { vec![] };
            Ok((v, g))
        };
        let (_, g) = eval(&prefix, true).unwrap();
        let r = check_gradients("prefix", &[prefix.clone()], &[g], GradCheckOptions::default(), |ts| {
            Ok(eval(&ts[0], false)?.0)
        })
        .unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn greedy_stops_and_budgets() {
        let eos_stub = |inputs: &[Vec<usize>]| {
            Ok(inputs
                .iter()
                .map(|_| {
                    let mut l = vec![0.0; 10];
                    l[EOS] = 5.0;
                    l
                })
                .collect())
        };
        assert_eq!(greedy_decode(1, 0, eos_stub).unwrap(), vec![Vec::<usize>::new()]);
        assert_eq!(greedy_decode(1, 10, eos_stub).unwrap(), vec![vec![EOS]]);

        // counts upward, never emits EOS: stops at the budget
        let count = |inputs: &[Vec<usize>]| {
            Ok(inputs
                .iter()
                .map(|s| {
                    let mut l = vec![0.0; 20];
                    l[4 + s.len() % 10] = 1.0;
                    l
                })
                .collect())
        };
        assert_eq!(greedy_decode(1, 3, count).unwrap(), vec![vec![5, 6, 7]]);
    }

    #[test]
    fn generation_is_deterministic() {
        let dims = dims(2);
        let p = params(&dims, 9);
        let prefix = Tensor::randn(&[1, 3, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        let a = generate(&p, &dims, &prefix, 8).unwrap();
        let b = generate(&p, &dims, &prefix, 8).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 8);
    }

    fn toy_corpus() -> Vec<Vec<usize>> {
        // two alternating templates over a handful of slot words
        (0..40)
            .map(|i| {
                let slot = 10 + i % 5;
                if i % 2 == 0 {
                    vec![4, 5, slot, 6, 7]
                } else {
                    vec![8, 9, slot, 6, 5, 4]
                }
            })
            .collect()
    }

    #[test]
    fn pretraining_reduces_loss_and_zero_epochs_is_no_op() {
        let dims = dims(2);
        let p0 = params(&dims, 11);
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            lr: 3e-3,
            lr_min: 3e-5,
            epochs: 0,
            batch_size: 8,
            ..TrainConfig::for_stage(Stage::Unimodal)
        };
        let mut p = p0.clone();
        lm_pretrain(&mut p, &dims, &corpus, &cfg).unwrap();
        assert_eq!(p, p0);

        let before = lm_cross_entropy(&p, &dims, &corpus, 16).unwrap();
        let cfg = TrainConfig { epochs: 15, ..cfg };
        let log = lm_pretrain(&mut p, &dims, &corpus, &cfg).unwrap();
        let after = lm_cross_entropy(&p, &dims, &corpus, 16).unwrap();
        assert_eq!(log.len(), 15);
        assert!(after < before, "{after} vs {before}");
        assert!(!p.is_frozen(Group::Encoder));
    }

    #[test]
    fn empty_corpus_rejected() {
        let dims = dims(1);
        let mut p = params(&dims, 12);
        let cfg = TrainConfig::for_stage(Stage::Unimodal);
        assert!(matches!(lm_pretrain(&mut p, &dims, &[], &cfg), Err(Error::Input(_))));
    }
}
