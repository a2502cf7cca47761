//! Text-generation metrics: smoothed BLEU, an exact-match METEOR variant and
//! an embedding-similarity score, plus corpus-level reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Example, VerLM};
use crate::tensor::Tensor;
use crate::text::{split_words, Vocab};
use crate::train::LossConfig;

pub const MAX_NGRAM: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU over n = 1..4 with uniform weights and add-one smoothing
/// for n >= 2. Counts are clipped by the per-reference maximum; the
/// effective reference length is the closest one (shorter on ties).
pub fn bleu(candidate: &str, references: &[&str]) -> f64 {
    let cand = split_words(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| split_words(r)).collect();
    bleu_tokens(&cand, &refs)
}

pub fn bleu_tokens(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let c = cand.len();
    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let counts = ngram_counts(cand, n);
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let mut clipped = 0usize;
        for (gram, &k) in &counts {
            let cap = ref_counts.iter().map(|m| m.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
            clipped += k.min(cap);
        }
        let total = c.saturating_sub(n - 1);
        let p = if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / MAX_NGRAM as f64;
    }
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = (1.0 - r as f64 / c as f64).exp().min(1.0);
    bp * log_sum.exp()
}

/// Constants of the METEOR score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeteorParams {
    /// Recall weight: `F = (1 + alpha) P R / (R + alpha P)`.
    pub alpha: f64,
    /// Penalty scale.
    pub gamma: f64,
    /// Penalty exponent.
    pub beta: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            alpha: 9.0,
            gamma: 0.5,
            beta: 3.0,
        }
    }
}

/// Greedy exact-match alignment: each candidate token, left to right, takes
/// the first unused reference token equal to it. Returns reference indices.
pub fn align(cand: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    cand.iter()
        .map(|tok| {
            let j = reference.iter().enumerate().position(|(j, r)| !used[j] && r == tok)?;
            used[j] = true;
            Some(j)
        })
        .collect()
}

/// Number of runs of matches that are adjacent in both sentences.
pub fn chunks(alignment: &[Option<usize>]) -> usize {
    let mut count = 0;
    let mut prev: Option<(usize, usize)> = None;
    for (i, a) in alignment.iter().enumerate() {
        match a {
            Some(j) => {
                if prev != Some((i.wrapping_sub(1), j.wrapping_sub(1))) {
                    count += 1;
                }
                prev = Some((i, *j));
            }
            None => prev = None,
        }
    }
    count
}

pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    meteor_lite_with(candidate, reference, &MeteorParams::default())
}

/// METEOR without stemming or synonyms. A single contiguous chunk carries
/// no fragmentation penalty, so identical sentences score exactly 1.
pub fn meteor_lite_with(candidate: &str, reference: &str, params: &MeteorParams) -> f64 {
    meteor_tokens(&split_words(candidate), &split_words(reference), params)
}

pub fn meteor_tokens(cand: &[String], reference: &[String], params: &MeteorParams) -> f64 {
    let alignment = align(cand, reference);
    let m = alignment.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = (1.0 + params.alpha) * p * r / (r + params.alpha * p);
    let ch = chunks(&alignment);
    let penalty = if ch == 1 {
        0.0
    } else {
        params.gamma * (ch as f64 / m as f64).powf(params.beta)
    };
    f * (1.0 - penalty)
}

fn mapped_cosine(table: &Tensor, a: usize, b: usize) -> f64 {
    if a == b {
        return 1.0;
    }
    let d = table.shape()[1];
    let x = &table.data()[a * d..(a + 1) * d];
    let y = &table.data()[b * d..(b + 1) * d];
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = if nx == 0.0 || ny == 0.0 { 0.0 } else { dot / (nx * ny) };
    (cos.clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Greedy-matching similarity over token ids and a `[V, d]` table; cosines
/// are mapped from `[-1, 1]` to `[0, 1]`.
pub fn semscore_ids(cand: &[usize], reference: &[usize], table: &Tensor) -> Result<f64> {
    if table.shape().len() != 2 {
        return Err(Error::dim("semscore", table.shape(), &[0, 0]));
    }
    let v = table.shape()[0];
    if let Some(&bad) = cand.iter().chain(reference).find(|&&i| i >= v) {
        return Err(Error::Index {
            index: bad,
            bound: v,
            context: "semscore",
        });
    }
    if cand.is_empty() || reference.is_empty() {
        return Ok(0.0);
    }
    let best = |from: &[usize], to: &[usize]| -> f64 {
        from.iter()
            .map(|&a| to.iter().map(|&b| mapped_cosine(table, a, b)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(cand, reference);
    let r = best(reference, cand);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

pub fn semscore(candidate: &str, reference: &str, table: &Tensor, vocab: &Vocab) -> Result<f64> {
    let ids = |s: &str| -> Vec<usize> { split_words(s).iter().map(|t| vocab.id(t)).collect() };
    semscore_ids(&ids(candidate), &ids(reference), table)
}

pub const CSV_HEADER: &str = "config,meteor_lite,bleu,semscore,ce_loss,n_examples";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub meteor_lite: f64,
    pub bleu: f64,
    pub semscore: f64,
    pub ce_loss: f64,
    pub n_examples: usize,
}

impl MetricReport {
    pub fn csv_row(&self, config: &str) -> String {
        format!(
            "{config},{:.6},{:.6},{:.6},{:.6},{}",
            self.meteor_lite, self.bleu, self.semscore, self.ce_loss, self.n_examples
        )
    }

    pub fn is_complete(&self) -> bool {
        [self.meteor_lite, self.bleu, self.semscore]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
            && self.ce_loss.is_finite()
            && self.ce_loss >= 0.0
            && self.n_examples > 0
    }
}

/// Report table with the CSV header.
pub fn reports_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricReport)>) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (name, r) in rows {
        let _ = writeln!(out, "{}", r.csv_row(name));
    }
    out
}

/// Mean METEOR-lite, BLEU and SemScore over aligned candidate/reference
/// id sequences.
pub fn score_corpus(cands: &[Vec<usize>], refs: &[Vec<usize>], vocab: &Vocab, table: &Tensor) -> Result<(f64, f64, f64)> {
    if cands.len() != refs.len() || cands.is_empty() {
        return Err(Error::Input(format!(
            "need matching non-empty candidate and reference lists ({} vs {})",
            cands.len(),
            refs.len()
        )));
    }
    let (mut m, mut b, mut s) = (0.0, 0.0, 0.0);
    let params = MeteorParams::default();
    for (c, r) in cands.iter().zip(refs) {
        let ct = split_words(&vocab.detokenize(c));
        let rt = split_words(&vocab.detokenize(r));
        m += meteor_tokens(&ct, &rt, &params);
        b += bleu_tokens(&ct, std::slice::from_ref(&rt));
        s += semscore_ids(c, r, table)?;
    }
    let n = cands.len() as f64;
    Ok((m / n, b / n, s / n))
}

/// Greedy generation budget: the longest reference plus some slack.
pub fn generation_budget(examples: &[Example]) -> usize {
    examples.iter().map(|e| e.target.len()).max().unwrap_or(0) + 8
}

/// Generates one description per example and scores it against the
/// example's target; adds teacher-forced cross-entropy.
pub fn evaluate_model(model: &VerLM, examples: &[Example], vocab: &Vocab, loss_cfg: &LossConfig) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let cands = model.generate(examples, generation_budget(examples), 32)?;
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    let table = model.params.require("decoder.tokens")?;
    let (meteor_lite, bleu, semscore) = score_corpus(&cands, &refs, vocab, table)?;
    let ce_loss = model.eval_loss(examples, loss_cfg, 32)?.ce;
    Ok(MetricReport {
        meteor_lite,
        bleu,
        semscore,
        ce_loss,
        n_examples: examples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_cases() {
        assert_eq!(bleu("the cat sat", &["the cat sat"]), 1.0);
        assert_eq!(bleu("", &["the cat"]), 0.0);
        // clipped unigrams 1/3; bigrams 0 of 2; trigrams 0 of 1; no 4-grams
        let want = ((1.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln() + (1.0f64 / 2.0).ln() + 0.0) / 4.0;
        let bp = (1.0f64 - 2.0 / 3.0).exp().min(1.0);
        assert!((bleu("the the the", &["the cat"]) - bp * want.exp()).abs() < 1e-12);
        // perfect precision, brevity penalty exp(1 - 6/2)
        let got = bleu("the cat", &["the cat sat on the mat"]);
        let p = ((2.0f64 / 2.0).ln() + (2.0f64 / 2.0).ln() + 0.0 + 0.0) / 4.0;
        assert!((got - (1.0f64 - 3.0).exp() * p.exp()).abs() < 1e-12);
    }

    #[test]
    fn meteor_cases() {
        assert_eq!(meteor_lite("a b c d e", "a b c d e"), 1.0);
        assert_eq!(meteor_lite("x y", "a b"), 0.0);
        assert_eq!(meteor_lite("b a", "a b"), 0.5);
        assert_eq!(meteor_lite("", "a b"), 0.0);
    }

    #[test]
    fn whitespace_does_not_matter() {
        let a = "the  cat ,sat";
        let b = "the cat , sat";
        assert_eq!(bleu(a, &["the cat sat"]), bleu(b, &["the cat sat"]));
        assert_eq!(meteor_lite(a, "cat sat"), meteor_lite(b, "cat sat"));
    }

    #[test]
    fn semscore_cases() {
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let table = Tensor::new(vec![4, 4], eye).unwrap();
        assert_eq!(semscore_ids(&[1, 2], &[1, 2], &table).unwrap(), 1.0);
        assert_eq!(semscore_ids(&[1], &[2], &table).unwrap(), 0.5);
        // precision (1 + 0.5)/2, recall 1
        let p = 0.75;
        assert!((semscore_ids(&[1, 3], &[1], &table).unwrap() - 2.0 * p / (p + 1.0)).abs() < 1e-15);
        assert!(semscore_ids(&[7], &[1], &table).is_err());
        assert_eq!(semscore_ids(&[], &[1], &table).unwrap(), 0.0);
    }

    #[test]
    fn report_csv_shape() {
        let r = MetricReport {
            meteor_lite: 0.5,
            bleu: 0.25,
            semscore: 0.75,
            ce_loss: 1.5,
            n_examples: 3,
        };
        let csv = reports_csv([("base", &r)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), 6);
        assert!(r.is_complete());
    }
}
