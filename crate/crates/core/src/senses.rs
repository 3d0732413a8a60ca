//! Truncated multi-sense skip-gram with a stick-breaking sense prior.
//!
//! Each word owns up to `K` sense vectors. The prior of sense `k` is
//! `β_k · Π_{r<k} (1 − β_r)`, with `β` re-estimated from assignment counts
//! under a `Beta(1, α)` prior. Training alternates a hard E-step (each
//! occurrence takes the sense maximising prior × context likelihood) with
//! negative-sampling SGD on the chosen sense and its context vectors.
//!
//! A fresh sense slot opens for an occurrence when the cosine similarity of
//! its context signature to every existing sense's context centroid falls
//! below `new_sense_threshold`. Signatures are mean output vectors of the
//! context, centred on the frequency-weighted mean output vector.

use std::collections::HashMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{Reader, Writer};
use crate::corpus::{word_key, LabeledSentence};
use crate::error::{Error, Result};
use crate::scalar::sigmoid;

pub const INVENTORY_MAGIC: &[u8; 8] = b"SQTGSENS";
pub const INVENTORY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SenseConfig {
    pub dim: usize,
    /// Truncation level (number of prototypes).
    pub max_senses: usize,
    pub window: usize,
    pub alpha: f64,
    pub epochs: usize,
    /// Single-sense epochs before sense splitting is allowed.
    pub warmup_epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub new_sense_threshold: f64,
    pub new_sense_prior: f64,
    pub min_count: usize,
    /// Kept for compatibility with the reference AdaGram option of the same
    /// name; the value -1 means no manual boost and is the only one honoured.
    pub initial_first_sense_weight: f64,
    pub seed: u64,
}

impl Default for SenseConfig {
    fn default() -> Self {
        SenseConfig {
            dim: 16,
            max_senses: 5,
            window: 5,
            alpha: 0.1,
            epochs: 8,
            warmup_epochs: 1,
            negatives: 5,
            learning_rate: 0.05,
            new_sense_threshold: 0.3,
            new_sense_prior: 0.1,
            min_count: 1,
            initial_first_sense_weight: -1.0,
            seed: 1,
        }
    }
}

impl SenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("window must be ≥ 1".into()));
        }
        if self.max_senses < 1 {
            return Err(Error::Config("number of senses must be ≥ 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("sense dimension must be positive".into()));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if !(self.new_sense_prior > 0.0 && self.new_sense_prior < 1.0) {
            return Err(Error::Config("new-sense prior must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `β_k · Π_{r<k}(1 − β_r)` for 1-based `k`.
pub fn stick_breaking_prior(betas: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > betas.len() {
        return Err(Error::OutOfRange(format!("sense {k} of {}", betas.len())));
    }
    let rest: f64 = betas[..k - 1].iter().map(|b| 1.0 - b).product();
    Ok(betas[k - 1] * rest)
}

/// Mass left beyond the truncation: `Π_k (1 − β_k)`.
pub fn stick_residual(betas: &[f64]) -> f64 {
    betas.iter().map(|b| 1.0 - b).product()
}

/// `β_k = (n_k + 1) / (n_k + n_{>k} + 1 + α)`.
pub fn sticks_from_counts(counts: &[f64], alpha: f64) -> Vec<f64> {
    (0..counts.len())
        .map(|k| {
            let tail: f64 = counts[k + 1..].iter().sum();
            (counts[k] + 1.0) / (counts[k] + tail + 1.0 + alpha)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SenseTaggedToken {
    pub surface: String,
    /// 1-based sense index.
    pub sense: usize,
}

impl SenseTaggedToken {
    pub fn render(&self) -> String {
        format!("{}_{}", self.surface, self.sense)
    }

    /// Splits on the last underscore; `None` unless the suffix is a positive integer.
    pub fn parse(s: &str) -> Option<Self> {
        let (surface, k) = s.rsplit_once('_')?;
        let sense: usize = k.parse().ok()?;
        if sense == 0 || surface.is_empty() {
            return None;
        }
        Some(SenseTaggedToken {
            surface: surface.to_string(),
            sense,
        })
    }
}

/// Trained sense vectors, context vectors and stick weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseInventory {
    pub words: Vec<String>,
    index: HashMap<String, usize>,
    pub max_senses: usize,
    pub dim: usize,
    pub alpha: f64,
    pub window: usize,
    /// `V × K` stick weights.
    pub sticks: Vec<f64>,
    /// `V × K` assignment counts from the last epoch.
    pub counts: Vec<f64>,
    /// `V × K × dim` sense (input) vectors.
    pub vectors: Vec<f64>,
    /// `V × dim` context (output) vectors.
    pub context: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl SenseInventory {
    fn with_words(words: Vec<String>, k: usize, dim: usize, alpha: f64, window: usize) -> Self {
        let v = words.len();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        SenseInventory {
            words,
            index,
            max_senses: k,
            dim,
            alpha,
            window,
            sticks: vec![0.0; v * k],
            counts: vec![0.0; v * k],
            vectors: vec![0.0; v * k * dim],
            context: vec![0.0; v * dim],
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn betas(&self, w: usize) -> &[f64] {
        &self.sticks[w * self.max_senses..(w + 1) * self.max_senses]
    }

    pub fn sense_counts(&self, w: usize) -> &[f64] {
        &self.counts[w * self.max_senses..(w + 1) * self.max_senses]
    }

    /// 1-based `k`.
    pub fn sense_vector(&self, w: usize, k: usize) -> &[f64] {
        let off = (w * self.max_senses + k - 1) * self.dim;
        &self.vectors[off..off + self.dim]
    }

    fn sense_vector_mut(&mut self, w: usize, k: usize) -> &mut [f64] {
        let off = (w * self.max_senses + k - 1) * self.dim;
        &mut self.vectors[off..off + self.dim]
    }

    pub fn context_vector(&self, w: usize) -> &[f64] {
        &self.context[w * self.dim..(w + 1) * self.dim]
    }

    /// Senses that received at least one assignment; sense 1 always counts.
    pub fn active_senses(&self, w: usize) -> Vec<usize> {
        let counts = self.sense_counts(w);
        (1..=self.max_senses)
            .filter(|&k| k == 1 || counts[k - 1] > 0.0)
            .collect()
    }

    fn refresh_sticks(&mut self) {
        for w in 0..self.len() {
            let b = sticks_from_counts(self.sense_counts(w), self.alpha);
            self.sticks[w * self.max_senses..(w + 1) * self.max_senses].copy_from_slice(&b);
        }
    }

    fn context_log_likelihood(&self, v: &[f64], ctx: &[usize]) -> f64 {
        ctx.iter()
            .map(|&c| sigmoid(dot(self.context_vector(c), v)).max(1e-300).ln())
            .sum()
    }

    /// Sense (1-based) maximising prior × context likelihood among active senses.
    /// Unknown words map to sense 1; unknown context words are ignored.
    pub fn disambiguate<S: AsRef<str>>(&self, word: &str, context: &[S]) -> usize {
        let Some(w) = self.word_index(word) else { return 1 };
        let ctx: Vec<usize> = context.iter().filter_map(|c| self.word_index(c.as_ref())).collect();
        let betas = self.betas(w);
        let mut best = (1, f64::NEG_INFINITY);
        for k in self.active_senses(w) {
            let prior = stick_breaking_prior(betas, k).expect("k in range");
            let s = prior.max(1e-300).ln() + self.context_log_likelihood(self.sense_vector(w, k), &ctx);
            if s > best.1 {
                best = (k, s);
            }
        }
        best.0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(INVENTORY_MAGIC);
        w.u32(INVENTORY_VERSION);
        w.u8(8);
        w.u32(self.len() as u32);
        w.u32(self.max_senses as u32);
        w.u32(self.dim as u32);
        w.f64(self.alpha);
        w.u32(self.window as u32);
        for (i, word) in self.words.iter().enumerate() {
            w.str(word);
            w.values(self.betas(i));
            w.values(self.sense_counts(i));
            let k = self.max_senses;
            w.values(&self.vectors[i * k * self.dim..(i + 1) * k * self.dim]);
            w.values(self.context_vector(i));
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != INVENTORY_MAGIC {
            return Err(Error::Format("not a sense inventory (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != INVENTORY_VERSION {
            return Err(Error::Format(format!("unsupported inventory version {version}")));
        }
        let precision = r.u8()?;
        let v = r.u32()? as usize;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let alpha = r.f64()?;
        let window = r.u32()? as usize;
        let mut words = Vec::with_capacity(v);
        let (mut sticks, mut counts, mut vectors, mut context) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..v {
            words.push(r.str()?);
            sticks.extend(r.values::<f64>(k, precision)?);
            counts.extend(r.values::<f64>(k, precision)?);
            vectors.extend(r.values::<f64>(k * dim, precision)?);
            context.extend(r.values::<f64>(dim, precision)?);
        }
        if !r.finished() {
            return Err(Error::Format("trailing bytes in sense inventory".into()));
        }
        let mut inv = SenseInventory::with_words(words, k, dim, alpha, window);
        inv.sticks = sticks;
        inv.counts = counts;
        inv.vectors = vectors;
        inv.context = context;
        Ok(inv)
    }

    /// FNV-1a hash of the encoded inventory, used to detect mismatched files.
    pub fn fingerprint(&self) -> u64 {
        self.encode()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn context_indices(ids: &[Option<usize>], i: usize, window: usize) -> Vec<usize> {
    let lo = i.saturating_sub(window);
    let hi = (i + window + 1).min(ids.len());
    (lo..hi).filter(|&j| j != i).filter_map(|j| ids[j]).collect()
}

/// Per-epoch trace of sense assignments, returned alongside the inventory.
#[derive(Clone, Debug, Default)]
pub struct SenseTrace {
    /// `assignments[s][t]`: 1-based sense chosen for token `t` of sentence `s` in the final epoch.
    pub assignments: Vec<Vec<usize>>,
}

/// Trains sense vectors on tokenized sentences (number-normalized internally).
pub fn train_senses<S: AsRef<str>>(corpus: &[Vec<S>], cfg: &SenseConfig) -> Result<(SenseInventory, SenseTrace)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keyed: Vec<Vec<String>> = corpus
        .iter()
        .map(|s| s.iter().map(|t| word_key(t.as_ref(), false)).collect())
        .collect();

    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in &keyed {
        for t in s {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= cfg.min_count).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let freqs: Vec<f64> = words.iter().map(|&(_, c)| c as f64).collect();
    let (k_max, dim) = (cfg.max_senses, cfg.dim);
    let mut inv = SenseInventory::with_words(
        words.iter().map(|(w, _)| w.to_string()).collect(),
        k_max,
        dim,
        cfg.alpha,
        cfg.window,
    );
    let v = inv.len();
    let ids: Vec<Vec<Option<usize>>> = keyed
        .iter()
        .map(|s| s.iter().map(|t| inv.word_index(t)).collect())
        .collect();
    let mut trace = SenseTrace::default();
    if v == 0 {
        return Ok((inv, trace));
    }

    let bound = 0.5 / dim as f64;
    for x in inv.vectors.iter_mut().chain(inv.context.iter_mut()) {
        *x = rng.gen_range(-bound..bound);
    }
    for (w, &f) in freqs.iter().enumerate() {
        inv.counts[w * k_max] = f;
    }
    inv.refresh_sticks();
    let noise = WeightedIndex::new(freqs.iter().map(|f| f.powf(0.75))).map_err(|e| Error::Config(e.to_string()))?;
    let total_freq: f64 = freqs.iter().sum();

    let mut grad_v = vec![0.0; dim];
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * (1.0 - epoch as f64 / cfg.epochs as f64).max(1e-4);
        let splitting = epoch >= cfg.warmup_epochs && k_max > 1;
        let mut mean_ctx = vec![0.0; dim];
        for (w, f) in freqs.iter().enumerate() {
            for (m, c) in mean_ctx.iter_mut().zip(inv.context_vector(w)) {
                *m += f * c / total_freq;
            }
        }
        let mut new_counts = vec![0.0; v * k_max];
        let mut centroids = vec![0.0; v * k_max * dim];
        let mut prior_override: HashMap<(usize, usize), f64> = HashMap::new();
        let mut opened = vec![false; v * k_max];
        let last_epoch = epoch + 1 == cfg.epochs;
        if last_epoch {
            trace.assignments.clear();
        }

        for sent in &ids {
            let mut sent_trace = Vec::with_capacity(sent.len());
            for i in 0..sent.len() {
                let Some(w) = sent[i] else {
                    sent_trace.push(1);
                    continue;
                };
                let ctx = context_indices(sent, i, cfg.window);
                let mut z = 1;
                if splitting && !ctx.is_empty() {
                    let active: Vec<usize> = (1..=k_max)
                        .filter(|&k| k == 1 || inv.counts[w * k_max + k - 1] > 0.0 || opened[w * k_max + k - 1])
                        .collect();
                    let betas = inv.betas(w).to_vec();
                    let mut best = (1, f64::NEG_INFINITY);
                    for &k in &active {
                        let prior = prior_override
                            .get(&(w, k))
                            .copied()
                            .unwrap_or_else(|| stick_breaking_prior(&betas, k).expect("in range"));
                        let s = prior.max(1e-300).ln() + inv.context_log_likelihood(inv.sense_vector(w, k), &ctx);
                        if s > best.1 {
                            best = (k, s);
                        }
                    }
                    z = best.0;

                    let mut sig = vec![0.0; dim];
                    for &c in &ctx {
                        for (s, x) in sig.iter_mut().zip(inv.context_vector(c)) {
                            *s += x / ctx.len() as f64;
                        }
                    }
                    for (s, m) in sig.iter_mut().zip(&mean_ctx) {
                        *s -= m;
                    }
                    let sig_norm = norm(&sig);
                    let mut max_cos = f64::NEG_INFINITY;
                    let mut any = false;
                    for &k in &active {
                        let off = (w * k_max + k - 1) * dim;
                        let cen = &centroids[off..off + dim];
                        let cn = norm(cen);
                        if cn > 0.0 && sig_norm > 0.0 {
                            any = true;
                            max_cos = max_cos.max(dot(&sig, cen) / (cn * sig_norm));
                        }
                    }
                    let free = (1..=k_max).find(|k| !active.contains(k));
                    if let (true, Some(k_new)) = (any && max_cos < cfg.new_sense_threshold, free) {
                        let base = inv.sense_vector(w, z).to_vec();
                        let scale = norm(&base) / sig_norm;
                        for ((dst, b), s) in inv.sense_vector_mut(w, k_new).iter_mut().zip(&base).zip(&sig) {
                            *dst = b + s * scale;
                        }
                        opened[w * k_max + k_new - 1] = true;
                        prior_override.insert((w, k_new), cfg.new_sense_prior);
                        z = k_new;
                    }
                    let off = (w * k_max + z - 1) * dim;
                    for (c, s) in centroids[off..off + dim].iter_mut().zip(&sig) {
                        *c += s;
                    }
                }
                new_counts[w * k_max + z - 1] += 1.0;
                sent_trace.push(z);

                // Negative-sampling update of sense z and its context vectors.
                for &c in &ctx {
                    grad_v.iter_mut().for_each(|g| *g = 0.0);
                    let targets = std::iter::once((c, 1.0)).chain((0..cfg.negatives).map(|_| (noise.sample(&mut rng), 0.0)));
                    let vz = inv.sense_vector(w, z).to_vec();
                    for (t, label) in targets.collect::<Vec<_>>() {
                        let off = t * dim;
                        let u = &mut inv.context[off..off + dim];
                        let g = lr * (label - sigmoid(dot(u, &vz)));
                        for ((gv, uu), vv) in grad_v.iter_mut().zip(u.iter_mut()).zip(&vz) {
                            *gv += g * *uu;
                            *uu += g * vv;
                        }
                    }
                    for (x, g) in inv.sense_vector_mut(w, z).iter_mut().zip(&grad_v) {
                        *x += g;
                    }
                }
            }
            if last_epoch {
                trace.assignments.push(sent_trace);
            }
        }
        if epoch >= cfg.warmup_epochs || epoch + 1 == cfg.epochs {
            inv.counts = new_counts;
        }
        inv.refresh_sticks();
    }
    Ok((inv, trace))
}

/// Renders every token as `surface_k` using context windows of `window` tokens per side.
pub fn retag_corpus(sentences: &[LabeledSentence], inventory: &SenseInventory, window: usize) -> Vec<LabeledSentence> {
    sentences
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.senses = Some(retag_tokens(&s.tokens, inventory, window));
            out
        })
        .collect()
}

pub fn retag_tokens<S: AsRef<str>>(tokens: &[S], inventory: &SenseInventory, window: usize) -> Vec<String> {
    let keys: Vec<String> = tokens.iter().map(|t| word_key(t.as_ref(), false)).collect();
    (0..tokens.len())
        .map(|i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(keys.len());
            let ctx: Vec<&str> = (lo..hi).filter(|&j| j != i).map(|j| keys[j].as_str()).collect();
            SenseTaggedToken {
                surface: tokens[i].as_ref().to_string(),
                sense: inventory.disambiguate(&keys[i], &ctx),
            }
            .render()
        })
        .collect()
}
