//! CoNLL column corpora, preprocessing and vocabularies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const NUMBER: usize = 2;
pub const START: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NUMBER_TOKEN: &str = "<number>";
pub const START_TOKEN: &str = "<start>";
const RESERVED: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, NUMBER_TOKEN, START_TOKEN];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    /// Sense-tagged renderings (`word_k`), filled in by the sense tagger.
    #[serde(default)]
    pub senses: Option<Vec<String>>,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty);
        }
        if tokens.len() != tags.len() {
            return Err(Error::Shape(format!("{} tokens, {} tags", tokens.len(), tags.len())));
        }
        if tokens.iter().any(String::is_empty) {
            return Err(Error::Format("empty token".into()));
        }
        Ok(LabeledSentence {
            tokens,
            tags,
            senses: None,
        })
    }

    /// Convenience constructor from `&str` slices.
    pub fn from_strs(tokens: &[&str], tags: &[&str]) -> Result<Self> {
        Self::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            tags.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSentence>,
    pub valid: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }

    /// Builds a split whose validation part is 10% of `train`, chosen by a seeded shuffle.
    pub fn carve_validation(train: Vec<LabeledSentence>, test: Vec<LabeledSentence>, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid = (train.len() / 10).max(usize::from(train.len() > 1));
        let cut = train.len() - n_valid;
        let mut keep = vec![true; train.len()];
        for &i in &order[cut..] {
            keep[i] = false;
        }
        let (mut tr, mut va) = (Vec::new(), Vec::new());
        for (s, k) in train.into_iter().zip(keep) {
            if k {
                tr.push(s)
            } else {
                va.push(s)
            }
        }
        DatasetSplit {
            train: tr,
            valid: va,
            test,
        }
    }
}

/// Parses CoNLL text. Columns are whitespace separated and a blank line ends a sentence.
/// Lines starting with `-DOCSTART-` are skipped.
pub fn parse_conll(text: &str, token_column: usize, tag_column: usize, origin: &Path) -> Result<Vec<LabeledSentence>> {
    let need = token_column.max(tag_column) + 1;
    let mut out = Vec::new();
    let (mut toks, mut tags) = (Vec::new(), Vec::new());
    let flush = |toks: &mut Vec<String>, tags: &mut Vec<String>, out: &mut Vec<LabeledSentence>| {
        if !toks.is_empty() {
            out.push(LabeledSentence {
                tokens: std::mem::take(toks),
                tags: std::mem::take(tags),
                senses: None,
            });
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut toks, &mut tags, &mut out);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < need {
            return Err(Error::parse(
                origin,
                i + 1,
                format!("expected at least {need} columns, found {}", cols.len()),
            ));
        }
        toks.push(cols[token_column].to_string());
        tags.push(cols[tag_column].to_string());
    }
    flush(&mut toks, &mut tags, &mut out);
    Ok(out)
}

pub fn read_conll(path: impl AsRef<Path>, token_column: usize, tag_column: usize) -> Result<Vec<LabeledSentence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_conll(&text, token_column, tag_column, path)
}

/// Two-column `token tag` rendering, sentences separated by blank lines.
pub fn format_conll(sentences: &[LabeledSentence]) -> String {
    let mut s = String::new();
    for (k, sent) in sentences.iter().enumerate() {
        if k > 0 {
            s.push('\n');
        }
        for (t, g) in sent.tokens.iter().zip(&sent.tags) {
            let _ = writeln!(s, "{t} {g}");
        }
    }
    s
}

pub fn write_conll(sentences: &[LabeledSentence], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_conll(sentences))?;
    Ok(())
}

/// Splits a tag into its prefix (`B`, `I` or `O`) and entity type.
pub fn split_tag(tag: &str) -> Result<(char, &str)> {
    if tag == "O" {
        return Ok(('O', ""));
    }
    match tag.split_once('-') {
        Some(("B", ty)) if !ty.is_empty() => Ok(('B', ty)),
        Some(("I", ty)) if !ty.is_empty() => Ok(('I', ty)),
        _ => Err(Error::MalformedTag(tag.to_string())),
    }
}

/// Converts IOB1 (or already-BIO2) tags to BIO2: an `I-X` that does not
/// continue an `X` chunk becomes `B-X`.
pub fn to_bio2<S: AsRef<str>>(tags: &[S]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev: (char, String) = ('O', String::new());
    for t in tags {
        let t = t.as_ref();
        let (p, ty) = split_tag(t)?;
        let fixed = if p == 'I' && (prev.0 == 'O' || prev.1 != ty) {
            format!("B-{ty}")
        } else {
            t.to_string()
        };
        prev = (p, ty.to_string());
        out.push(fixed);
    }
    Ok(out)
}

/// Digits, optionally grouped by single `.`, `,`, `/` or `-` separators.
pub fn is_number(token: &str) -> bool {
    let mut saw_digit = false;
    let mut last_sep = true;
    for ch in token.chars() {
        if ch.is_ascii_digit() {
            saw_digit = true;
            last_sep = false;
        } else if matches!(ch, '.' | ',' | '/' | '-') {
            if last_sep {
                return false;
            }
            last_sep = true;
        } else {
            return false;
        }
    }
    saw_digit && !last_sep
}

pub fn normalize_numbers(token: &str) -> &str {
    if is_number(token) {
        NUMBER_TOKEN
    } else {
        token
    }
}

/// Embedding-lookup key: numbers collapsed, optionally lowercased.
pub fn word_key(token: &str, lowercase: bool) -> String {
    let t = normalize_numbers(token);
    if lowercase && t != NUMBER_TOKEN {
        t.to_lowercase()
    } else {
        t.to_string()
    }
}

pub fn pad_start<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    std::iter::once(START_TOKEN.to_string())
        .chain(tokens.iter().map(|t| t.as_ref().to_string()))
        .collect()
}

/// Token ↔ index mapping with fixed reserved slots `PAD, UNK, NUMBER, START`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_tokens(r.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
    }

    /// Adds tokens with frequency `≥ min_count`, ordered by descending
    /// frequency then ascending token; `extra_reserved` follow the four fixed slots.
    pub fn build<'a, I>(tokens: I, min_count: usize, extra_reserved: &[&str]) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut list: Vec<String> = RESERVED.iter().chain(extra_reserved).map(|s| s.to_string()).collect();
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !list.iter().any(|r| r == t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        list.extend(entries.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(list)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or `UNK` when unseen.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Word vocabulary over number-normalized (optionally lowercased) tokens.
pub fn build_vocab(sentences: &[LabeledSentence], min_count: usize, lowercase: bool) -> Vocab {
    let keys: Vec<String> = sentences
        .iter()
        .flat_map(|s| s.tokens.iter().map(|t| word_key(t, lowercase)))
        .collect();
    Vocab::build(keys.iter().map(String::as_str), min_count, &[])
}

/// Reads `token v1 … v_dim` lines. Rows for vocabulary tokens found in the
/// file are copied; the rest are drawn from `U(−0.5/dim, 0.5/dim)`.
/// Returns the matrix and the fraction of vocabulary rows covered.
pub fn load_pretrained_embeddings<T: Scalar>(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, f64)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let bound = 0.5 / dim as f64;
    let mut data: Vec<T> = (0..vocab.len() * dim)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    let mut covered = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let vals: Vec<&str> = parts.collect();
        if vals.len() != dim {
            return Err(Error::parse(path, i + 1, format!("expected {dim} values, found {}", vals.len())));
        }
        let Some(row) = vocab.get(word) else { continue };
        for (k, v) in vals.iter().enumerate() {
            let x: f64 = v
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad number {v:?}")))?;
            data[row * dim + k] = T::lit(x);
        }
        covered[row] = true;
    }
    let coverage = if vocab.is_empty() {
        0.0
    } else {
        covered.iter().filter(|&&c| c).count() as f64 / vocab.len() as f64
    };
    Ok((Tensor::new(vec![vocab.len(), dim], data)?, coverage))
}

/// One epoch of index batches; the order depends only on `seed`.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
