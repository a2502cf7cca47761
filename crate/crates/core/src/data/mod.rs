//! Synthetic pair dataset, its text file format and corpus statistics.

mod synth;

use std::fmt;
use std::fs;
use std::path::Path;

pub use synth::{
    decode_slots, gen_identities, gen_pairs, noise_seed, phrase, realize, render_descriptions, Identity, Label,
    PairRecord, Slot, Tier, ATTR_DIM, DEFAULT_MATCH_FRACTION, GROOMING_FLIP, MATCH_VERDICT, NOISE_STD,
    NO_MATCH_VERDICT, SLOTS,
};

use crate::encoder::FaceAttr;
use crate::error::{Error, Result};
use crate::model::Example;
use crate::text::{is_word, split_words, Vocab, PROMPT_LEN};

/// Description length statistics in words, plus vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub average: f64,
    pub median: usize,
    pub max: usize,
    pub vocab: usize,
}

impl CorpusStats {
    pub const HEADER: &'static str = "Average Median Max Vocab";
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} {} {} {}", self.average, self.median, self.max, self.vocab)
    }
}

/// Word counts ignore punctuation tokens; the median of an even-sized list
/// is the lower middle value.
pub fn corpus_stats<S: AsRef<str>>(descriptions: &[S]) -> Result<CorpusStats> {
    if descriptions.is_empty() {
        return Err(Error::Input("corpus_stats needs at least one description".into()));
    }
    let mut vocab = std::collections::BTreeSet::new();
    let mut counts: Vec<usize> = descriptions
        .iter()
        .map(|d| {
            let words: Vec<String> = split_words(d.as_ref()).into_iter().filter(|t| is_word(t)).collect();
            let n = words.len();
            vocab.extend(words);
            n
        })
        .collect();
    let average = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    counts.sort_unstable();
    Ok(CorpusStats {
        average,
        median: counts[(counts.len() - 1) / 2],
        max: *counts.last().expect("non-empty"),
        vocab: vocab.len(),
    })
}

pub const SCHEMA_VERSION: u32 = 1;

/// A generated split with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub records: Vec<PairRecord>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            _ => out.push(ch),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(ch) = it.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => return Err(Error::Format(format!("bad escape \\{}", other.map_or(String::new(), String::from)))),
        }
    }
    Ok(out)
}

fn join_attrs(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

fn parse_attrs(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("bad attribute value {x:?}")))
        })
        .collect()
}

impl Dataset {
    pub fn to_text(&self) -> String {
        let mut out = format!("# verlm-dataset schema={SCHEMA_VERSION} seed={}\n", self.seed);
        for r in &self.records {
            let fields = [
                ("pair_id", r.pair_id.to_string()),
                ("identity_a", r.face_a.identity_id.to_string()),
                ("identity_b", r.face_b.identity_id.to_string()),
                ("attrs_a", join_attrs(&r.face_a.attrs)),
                ("attrs_b", join_attrs(&r.face_b.attrs)),
                ("label", r.label.to_string()),
                ("prompt", escape(&r.prompt)),
                ("concise", escape(&r.concise)),
                ("comprehensive", escape(&r.comprehensive)),
            ];
            let line: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&line.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("dataset file is empty".into()))?;
        let mut schema = None;
        let mut seed = None;
        for part in header
            .strip_prefix("# verlm-dataset ")
            .ok_or_else(|| Error::Format("missing dataset header".into()))?
            .split_whitespace()
        {
            match part.split_once('=') {
                Some(("schema", v)) => schema = v.parse::<u32>().ok(),
                Some(("seed", v)) => seed = v.parse::<u64>().ok(),
                _ => return Err(Error::Format(format!("unknown header field {part:?}"))),
            }
        }
        if schema != Some(SCHEMA_VERSION) {
            return Err(Error::Format(format!("unsupported dataset schema {schema:?}")));
        }
        let seed = seed.ok_or_else(|| Error::Format("header lacks a seed".into()))?;
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut map = std::collections::BTreeMap::new();
            for field in line.split('\t') {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("record {}: field without '='", n + 1)))?;
                if map.insert(k, v).is_some() {
                    return Err(Error::Format(format!("record {}: duplicate key {k}", n + 1)));
                }
            }
            let get = |k: &str| {
                map.get(k)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("record {}: missing {k}", n + 1)))
            };
            let int = |k: &str| -> Result<usize> {
                get(k)?
                    .parse()
                    .map_err(|_| Error::Format(format!("record {}: {k} is not an integer", n + 1)))
            };
            let pair_id = int("pair_id")?;
            let face_a = FaceAttr {
                identity_id: int("identity_a")?,
                attrs: parse_attrs(get("attrs_a")?)?,
                noise_seed: noise_seed(seed, pair_id, 0),
            };
            let face_b = FaceAttr {
                identity_id: int("identity_b")?,
                attrs: parse_attrs(get("attrs_b")?)?,
                noise_seed: noise_seed(seed, pair_id, 1),
            };
            if map.len() != 9 {
                return Err(Error::Format(format!("record {}: unexpected keys", n + 1)));
            }
            records.push(PairRecord {
                pair_id,
                face_a,
                face_b,
                label: get("label")?.parse()?,
                prompt: unescape(get("prompt")?)?,
                concise: unescape(get("concise")?)?,
                comprehensive: unescape(get("comprehensive")?)?,
            });
        }
        Ok(Self { seed, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Sizes for a train/test pair of splits drawn from one identity pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub identities: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub match_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            identities: 400,
            train_pairs: 512,
            test_pairs: 128,
            match_fraction: DEFAULT_MATCH_FRACTION,
        }
    }
}

/// Train and test splits for `seed`. The test split uses a derived seed.
pub fn gen_splits(spec: &SplitSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let ids = gen_identities(spec.identities, ATTR_DIM, seed)?;
    let test_seed = noise_seed(seed, usize::MAX, 2);
    Ok((
        Dataset {
            seed,
            records: gen_pairs(&ids, spec.train_pairs, spec.match_fraction, seed)?,
        },
        Dataset {
            seed: test_seed,
            records: gen_pairs(&ids, spec.test_pairs, spec.match_fraction, test_seed)?,
        },
    ))
}

/// Vocabulary over the prompt and both description tiers.
pub fn build_vocab(records: &[PairRecord]) -> Result<Vocab> {
    let corpus: Vec<&str> = records
        .iter()
        .flat_map(|r| [r.prompt.as_str(), r.concise.as_str(), r.comprehensive.as_str()])
        .collect();
    Vocab::build(&corpus, 1)
}

/// Tokenized examples for one description tier; descriptions are cut to
/// `max_target` ids.
pub fn to_examples(records: &[PairRecord], vocab: &Vocab, tier: Tier, max_target: usize) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example {
            face_a: r.face_a.attrs.clone(),
            face_b: r.face_b.attrs.clone(),
            prompt: vocab.tokenize(&r.prompt, PROMPT_LEN).padded(PROMPT_LEN),
            target: vocab.tokenize(r.description(tier), max_target).ids,
        })
        .collect()
}

/// Every face in the records, for encoder pretraining.
pub fn faces(records: &[PairRecord]) -> Vec<FaceAttr> {
    records.iter().flat_map(|r| [r.face_a.clone(), r.face_b.clone()]).collect()
}
