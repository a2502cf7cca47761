//! Word-level vocabulary, tokenization and the prompt embedder.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Prompt attached to every record.
pub const PROMPT: &str = "do these two faces show the same person? explain.";

/// Token count of [`PROMPT`].
pub const PROMPT_LEN: usize = 11;

/// Splits text into lowercased word and punctuation tokens.
///
/// A word is a run of alphanumerics, with `-` and `'` allowed inside it
/// ("almond-shaped" stays whole). Any other non-whitespace character is a
/// token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        let joiner = (ch == '-' || ch == '\'')
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric());
        if ch.is_alphanumeric() || joiner {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Whitespace-normalized form of `text`: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

/// Whether a token counts as a word (as opposed to punctuation).
pub fn is_word(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Right-pads with PAD (or truncates) to exactly `len` ids.
    pub fn padded(&self, len: usize) -> Vec<usize> {
        let mut ids = self.ids.clone();
        ids.resize(len, PAD);
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Input("vocab must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocab token {t:?} at line {}", i + 1)));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Builds a vocabulary from a corpus. Tokens with frequency at least
    /// `min_count` are kept, ordered by descending frequency then
    /// lexicographically, after the four specials.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        if min_count == 0 {
            return Err(Error::Input("min_count must be positive".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in split_words(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !SPECIALS.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps text to ids (unknown words become UNK), truncated to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSeq {
        TokenSeq::new(
            split_words(text)
                .iter()
                .take(max_len)
                .map(|w| self.id(w))
                .collect(),
        )
    }

    /// Joins the tokens of `ids` with single spaces; PAD, BOS and EOS are
    /// dropped and decoding stops at the first EOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => words.push(self.token(id).unwrap_or(SPECIALS[UNK])),
            }
        }
        words.join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}

/// Embeds a batch of equal-length id sequences: token rows plus learned
/// positional rows, giving `[b, t, d]`.
pub fn embed_text(g: &mut Graph, table: Var, positions: Var, batch: &[Vec<usize>]) -> Result<Var> {
    let b = batch.len();
    let t = batch.first().map_or(0, Vec::len);
    if b == 0 || t == 0 {
        return Err(Error::Input("embed_text needs a non-empty batch".into()));
    }
    if batch.iter().any(|s| s.len() != t) {
        return Err(Error::Input("embed_text needs equal-length sequences".into()));
    }
    let d = g.shape(table)[1];
    if g.shape(positions).len() != 2 || g.shape(positions)[1] != d {
        return Err(Error::dim("embed_text", g.shape(table), g.shape(positions)));
    }
    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    let tok = g.gather(table, &ids)?;
    let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = g.gather(positions, &pos_ids)?;
    let sum = g.add(tok, pos)?;
    g.reshape(sum, &[b, t, d])
}
