//! The tagger: four encoder branches, scalar fusion, a recurrent decode head
//! and a linear-chain CRF on top.
//!
//! Branches (fusion weight in brackets):
//!
//! * word `[w1]`: word embeddings, optionally concatenated with the
//!   character encoding, suffix and spelling vectors, through a BLSTM;
//! * SP-CLSTM `[w2]`: a character BLSTM over the whole sentence, sampled at
//!   word boundaries;
//! * sense `[w3]`: sense embeddings initialised from a [`SenseInventory`];
//! * bigram `[w4]`: a 2-row convolution over START-padded word embeddings.
//!
//! Every branch ends in `m × d` (a linear projection is inserted when the
//! BLSTM width differs from `d`). The fused rows feed a unidirectional LSTM;
//! each step's `tanh` output, together with the features placed at the
//! output and the previous-tag embedding, goes through a linear layer to
//! produce the CRF emissions.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::restore_into;
use crate::autodiff::dropout::dropout_node;
use crate::autodiff::{load_checkpoint, save_checkpoint};
use crate::autodiff::{Gradients, Graph, Mode, NodeId, ParamId, ParamStore};
use crate::corpus::{build_vocab, word_key, LabeledSentence, Vocab, START};
use crate::crf::{nll_node, viterbi_decode, CrfParams, TransitionMask};
use crate::error::{Error, Result};
use crate::layers::{
    bigram_conv, char_word_encoding, run_blstm, selective_pickup, uniform_tensor, BigramKernel, LstmParams,
};
use crate::morph::{spelling_vector, SuffixInventory, NUM_SPELLING, NUM_SUFFIXES};
use crate::scalar::Scalar;
use crate::senses::{retag_tokens, SenseInventory, SenseTaggedToken};
use crate::tensor::Tensor;

/// Reserved character joining words in the SP-CLSTM stream.
pub const BOUNDARY_CHAR: &str = "<boundary>";

/// Where a feature vector enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Linear map to `d`, added to the fused branch output.
    #[serde(alias = "r")]
    Residual,
    /// Concatenated with the word embedding before the word BLSTM.
    #[serde(alias = "cw")]
    ConcatWord,
    /// Concatenated with the decode-head state before the output layer.
    #[serde(alias = "co")]
    ConcatOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Word,
    SpClstm,
    Sense,
    Bigram,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Word, Branch::SpClstm, Branch::Sense, Branch::Bigram];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Word => "word",
            Branch::SpClstm => "sp-clstm",
            Branch::Sense => "sense",
            Branch::Bigram => "bigram",
        }
    }

    /// Parameter name of the branch's fusion scalar.
    pub fn fusion_param(self) -> &'static str {
        match self {
            Branch::Word => "fusion.w1",
            Branch::SpClstm => "fusion.w2",
            Branch::Sense => "fusion.w3",
            Branch::Bigram => "fusion.w4",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub use_word_emb: bool,
    pub use_sense: bool,
    pub use_sp_clstm: bool,
    pub use_bigram: bool,
    pub use_char_emb: bool,
    pub use_suffix: bool,
    pub use_spelling: bool,
    pub use_prev_tag: bool,
    pub suffix_placement: Placement,
    pub spelling_placement: Placement,
    pub char_placement: Placement,
    /// Word, sense and fused dimension `d`.
    pub word_dim: usize,
    pub char_emb_dim: usize,
    /// Size `n` of the per-word character encoding.
    pub char_hidden: usize,
    /// Per-direction hidden size of the branch BLSTMs; `None` means `d / 2`.
    pub hidden_size: Option<usize>,
    pub sp_hidden: usize,
    pub decode_hidden: usize,
    pub tag_emb_dim: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
    pub lowercase: bool,
    pub min_count: usize,
    pub share_char_tables: bool,
    /// Forbid BIO-invalid transitions in the CRF.
    pub bio_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_word_emb: true,
            use_sense: true,
            use_sp_clstm: true,
            use_bigram: false,
            use_char_emb: true,
            use_suffix: true,
            use_spelling: true,
            use_prev_tag: true,
            suffix_placement: Placement::ConcatWord,
            spelling_placement: Placement::ConcatOutput,
            char_placement: Placement::ConcatWord,
            word_dim: 50,
            char_emb_dim: 16,
            char_hidden: 25,
            hidden_size: None,
            sp_hidden: 25,
            decode_hidden: 50,
            tag_emb_dim: 10,
            lstm_layers: 1,
            dropout: 0.25,
            lowercase: false,
            min_count: 1,
            share_char_tables: false,
            bio_mask: false,
        }
    }
}

impl ModelConfig {
    /// Only the word branch, no auxiliary features.
    pub fn word_only() -> Self {
        ModelConfig {
            use_sense: false,
            use_sp_clstm: false,
            use_bigram: false,
            use_char_emb: false,
            use_suffix: false,
            use_spelling: false,
            use_prev_tag: false,
            ..Default::default()
        }
    }

    pub fn branches(&self) -> Vec<Branch> {
        Branch::ALL
            .into_iter()
            .filter(|b| match b {
                Branch::Word => self.use_word_emb,
                Branch::SpClstm => self.use_sp_clstm,
                Branch::Sense => self.use_sense,
                Branch::Bigram => self.use_bigram,
            })
            .collect()
    }

    pub fn branch_hidden(&self) -> usize {
        self.hidden_size.unwrap_or((self.word_dim / 2).max(1))
    }

    pub fn needs_chars(&self) -> bool {
        self.use_char_emb || self.use_sp_clstm
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.branches().is_empty() {
            return bad("at least one encoder branch must be enabled".into());
        }
        if self.suffix_placement == Placement::Residual || self.char_placement == Placement::Residual {
            return bad("only the spelling features support the residual placement".into());
        }
        let cw = [
            (self.use_char_emb, self.char_placement, "char"),
            (self.use_suffix, self.suffix_placement, "suffix"),
            (self.use_spelling, self.spelling_placement, "spelling"),
        ];
        for (on, place, name) in cw {
            if on && place == Placement::ConcatWord && !self.use_word_emb {
                return bad(format!("{name} concatenated with the word embedding needs the word branch"));
            }
        }
        let dims = [
            self.word_dim,
            self.char_emb_dim,
            self.char_hidden,
            self.branch_hidden(),
            self.sp_hidden,
            self.decode_hidden,
            self.tag_emb_dim,
            self.lstm_layers,
        ];
        if dims.contains(&0) {
            return bad("all dimensions and the layer count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Vocabularies and tag set fixed at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vocab,
    pub chars: Vocab,
    pub senses: Vocab,
    pub tags: Vec<String>,
}

impl Vocabularies {
    pub fn build(train: &[LabeledSentence], config: &ModelConfig, senses: Option<&SenseInventory>) -> Self {
        let words = build_vocab(train, config.min_count, config.lowercase);
        let chars: Vec<String> = train
            .iter()
            .flat_map(|s| s.tokens.iter().flat_map(|t| t.chars().map(String::from)))
            .collect();
        let chars = Vocab::build(chars.iter().map(String::as_str), 1, &[BOUNDARY_CHAR]);
        let sense_keys: Vec<String> = senses
            .map(|inv| {
                inv.words
                    .iter()
                    .flat_map(|w| (1..=inv.max_senses).map(move |k| format!("{w}_{k}")))
                    .collect()
            })
            .unwrap_or_default();
        let senses = Vocab::build(sense_keys.iter().map(String::as_str), 1, &[]);
        let tags: BTreeSet<&str> = train.iter().flat_map(|s| s.tags.iter().map(String::as_str)).collect();
        Vocabularies {
            words,
            chars,
            senses,
            tags: tags.into_iter().map(String::from).collect(),
        }
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }
}

/// Per-sentence model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T> {
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    /// SP-CLSTM character stream with boundary characters between words.
    pub stream: Vec<usize>,
    pub starts: Vec<usize>,
    pub ends: Vec<usize>,
    pub senses: Vec<usize>,
    pub spelling: Tensor<T>,
    pub suffix: Tensor<T>,
}

impl<T> Features<T> {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// What the decode head sees as the previous tag.
#[derive(Clone, Copy, Debug)]
pub enum PrevTags<'a> {
    /// A zero vector in place of the embedding (first inference pass).
    Blank,
    /// Tag indices `y_1..y_m`; position `t` embeds `y_{t-1}`, position 0 a start symbol.
    Tags(&'a [usize]),
}

#[derive(Clone, Debug)]
struct Encoder {
    emb: ParamId,
    layers: Vec<BiLstm>,
    proj: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct Params {
    word: Option<Encoder>,
    char_enc: Option<(ParamId, LstmParams)>,
    sp: Option<Encoder>,
    sense: Option<Encoder>,
    bigram: Option<(Encoder, BigramKernel)>,
    fusion: Vec<(Branch, ParamId)>,
    spelling_res: Option<(ParamId, ParamId)>,
    head: LstmParams,
    tag_emb: Option<ParamId>,
    fc: (ParamId, ParamId),
    crf: (ParamId, ParamId, ParamId),
}

fn embedding_table<T: Scalar>(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    uniform_tensor(&[rows, dim], (3.0 / dim as f64).sqrt(), rng)
}

fn register_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    output: usize,
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId)> {
    let w = store.register(format!("{prefix}.w"), uniform_tensor(&[output, input], (1.0 / input as f64).sqrt(), rng))?;
    let b = store.register(format!("{prefix}.b"), Tensor::zeros(&[output]))?;
    Ok((w, b))
}

/// Forward and backward parameters of one BLSTM layer.
type BiLstm = (LstmParams, LstmParams);
type Stack = (Vec<BiLstm>, Option<(ParamId, ParamId)>);

/// BLSTM stack (`layers` deep) plus an output projection when `2h ≠ d`.
fn register_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    layers: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<Stack> {
    let mut stack = Vec::with_capacity(layers);
    for l in 0..layers {
        let name = if l == 0 { prefix.to_string() } else { format!("{prefix}.l{l}") };
        let inp = if l == 0 { input } else { 2 * hidden };
        let f = LstmParams::register(store, &format!("{name}.fwd"), inp, hidden, rng)?;
        let b = LstmParams::register(store, &format!("{name}.bwd"), inp, hidden, rng)?;
        stack.push((f, b));
    }
    let proj = if 2 * hidden != d {
        Some(register_linear(store, &format!("{prefix}.proj"), 2 * hidden, d, rng)?)
    } else {
        None
    };
    Ok((stack, proj))
}

fn run_stack<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, enc: &Encoder) -> Result<NodeId> {
    let mut h = x;
    for (f, b) in &enc.layers {
        h = run_blstm(g, h, f, b)?;
    }
    match enc.proj {
        Some((w, b)) => {
            let (w, b) = (g.param(w), g.param(b));
            g.linear(h, w, Some(b))
        }
        None => Ok(h),
    }
}

/// `Σ_i w_i · O_i` over branch outputs of equal shape.
pub fn fuse<T: Scalar>(g: &mut Graph<'_, T>, outputs: &[NodeId], weights: &[NodeId]) -> Result<NodeId> {
    if outputs.is_empty() || outputs.len() != weights.len() {
        return Err(Error::Shape(format!("{} branch outputs, {} fusion weights", outputs.len(), weights.len())));
    }
    let mut acc = g.scale(outputs[0], weights[0])?;
    for (&o, &w) in outputs.iter().zip(weights).skip(1) {
        let term = g.scale(o, w)?;
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}

fn in_branch<X>(branch: &'static str, r: Result<X>) -> Result<X> {
    r.map_err(|e| Error::Branch { branch, source: Box::new(e) })
}

/// A trained or freshly initialised tagger.
#[derive(Clone, Debug)]
pub struct Tagger<T: Scalar> {
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    pub suffixes: Option<SuffixInventory>,
    pub senses: Option<SenseInventory>,
    pub store: ParamStore<T>,
    params: Params,
}

impl<T: Scalar> Tagger<T> {
    /// Builds vocabularies from `train` and initialises every parameter from `seed`.
    pub fn build(
        config: ModelConfig,
        train: &[LabeledSentence],
        suffixes: Option<SuffixInventory>,
        senses: Option<SenseInventory>,
        seed: u64,
    ) -> Result<Self> {
        let vocabs = Vocabularies::build(train, &config, senses.as_ref().filter(|_| config.use_sense));
        if vocabs.tags.is_empty() {
            return Err(Error::Empty);
        }
        Self::new(config, vocabs, suffixes, senses, seed)
    }

    pub fn new(
        config: ModelConfig,
        vocabs: Vocabularies,
        suffixes: Option<SuffixInventory>,
        senses: Option<SenseInventory>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if config.use_suffix && suffixes.is_none() {
            return Err(Error::Config("suffix features need a suffix inventory".into()));
        }
        if config.use_sense && senses.is_none() {
            return Err(Error::Config("the sense branch needs a sense inventory".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.word_dim;
        let c = vocabs.tags.len();
        let h = config.branch_hidden();
        let layers = config.lstm_layers;
        let rng = &mut rng;

        let char_enc = if config.use_char_emb {
            let table = store.register("char.emb", embedding_table(vocabs.chars.len(), config.char_emb_dim, rng))?;
            let lstm = LstmParams::register(&mut store, "char.lstm", config.char_emb_dim, config.char_hidden, rng)?;
            Some((table, lstm))
        } else {
            None
        };

        let word = if config.use_word_emb {
            let emb = store.register("word.emb", embedding_table(vocabs.words.len(), d, rng))?;
            let mut input = d;
            if config.use_char_emb && config.char_placement == Placement::ConcatWord {
                input += config.char_hidden;
            }
            if config.use_suffix && config.suffix_placement == Placement::ConcatWord {
                input += NUM_SUFFIXES;
            }
            if config.use_spelling && config.spelling_placement == Placement::ConcatWord {
                input += NUM_SPELLING;
            }
            let (layers, proj) = register_stack(&mut store, "word", input, h, layers, d, rng)?;
            Some(Encoder { emb, layers, proj })
        } else {
            None
        };

        let sp = if config.use_sp_clstm {
            let emb = match (&char_enc, config.share_char_tables) {
                (Some((table, _)), true) => *table,
                _ => store.register("sp.emb", embedding_table(vocabs.chars.len(), config.char_emb_dim, rng))?,
            };
            let (layers, proj) = register_stack(&mut store, "sp", config.char_emb_dim, config.sp_hidden, 1, d, rng)?;
            Some(Encoder { emb, layers, proj })
        } else {
            None
        };

        let sense = if config.use_sense {
            let inv = senses.as_ref().expect("checked above");
            if inv.dim != d {
                return Err(Error::Mismatch(format!(
                    "sense inventory dimension {} differs from word dimension {d}",
                    inv.dim
                )));
            }
            let mut table: Tensor<T> = embedding_table(vocabs.senses.len(), d, rng);
            for (w, word) in inv.words.iter().enumerate() {
                for k in 1..=inv.max_senses {
                    if let Some(row) = vocabs.senses.get(&format!("{word}_{k}")) {
                        for (dst, &v) in table.row_mut(row).iter_mut().zip(inv.sense_vector(w, k)) {
                            *dst = T::lit(v);
                        }
                    }
                }
            }
            let emb = store.register("sense.emb", table)?;
            let (layers, proj) = register_stack(&mut store, "sense", d, h, layers, d, rng)?;
            Some(Encoder { emb, layers, proj })
        } else {
            None
        };

        let bigram = if config.use_bigram {
            let emb = store.register("bigram.emb", embedding_table(vocabs.words.len(), d, rng))?;
            let kernel = BigramKernel::register(&mut store, "bigram.kernel", d, rng)?;
            let (layers, proj) = register_stack(&mut store, "bigram", d, h, layers, d, rng)?;
            Some((Encoder { emb, layers, proj }, kernel))
        } else {
            None
        };

        let mut fusion = Vec::new();
        for b in config.branches() {
            fusion.push((b, store.register(b.fusion_param(), Tensor::full(&[1], T::one()))?));
        }

        let spelling_res = if config.use_spelling && config.spelling_placement == Placement::Residual {
            Some(register_linear(&mut store, "spelling.res", NUM_SPELLING, d, rng)?)
        } else {
            None
        };

        let head = LstmParams::register(&mut store, "head.lstm", d, config.decode_hidden, rng)?;
        let tag_emb = if config.use_prev_tag {
            Some(store.register("head.tag_emb", embedding_table(c + 1, config.tag_emb_dim, rng))?)
        } else {
            None
        };
        let mut fc_in = config.decode_hidden;
        if config.use_spelling && config.spelling_placement == Placement::ConcatOutput {
            fc_in += NUM_SPELLING;
        }
        if config.use_suffix && config.suffix_placement == Placement::ConcatOutput {
            fc_in += NUM_SUFFIXES;
        }
        if config.use_char_emb && config.char_placement == Placement::ConcatOutput {
            fc_in += config.char_hidden;
        }
        if config.use_prev_tag {
            fc_in += config.tag_emb_dim;
        }
        let fc = register_linear(&mut store, "head.fc", fc_in, c, rng)?;
        let crf = (
            store.register("crf.trans", Tensor::zeros(&[c, c]))?,
            store.register("crf.start", Tensor::zeros(&[c]))?,
            store.register("crf.end", Tensor::zeros(&[c]))?,
        );

        Ok(Tagger {
            params: Params {
                word,
                char_enc,
                sp,
                sense,
                bigram,
                fusion,
                spelling_res,
                head,
                tag_emb,
                fc,
                crf,
            },
            config,
            vocabs,
            suffixes,
            senses,
            store,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.vocabs.tags.len()
    }

    /// Current fusion scalars per enabled branch.
    pub fn fusion_weights(&self) -> Vec<(Branch, T)> {
        self.params.fusion.iter().map(|&(b, id)| (b, self.store.value(id).data()[0])).collect()
    }

    pub fn crf_params(&self) -> CrfParams<T> {
        let (a, s, e) = self.params.crf;
        let crf = CrfParams {
            transitions: self.store.value(a).clone(),
            start: self.store.value(s).clone(),
            end: self.store.value(e).clone(),
            mask: None,
        };
        match self.mask() {
            Some(m) => crf.with_mask(m),
            None => crf,
        }
    }

    fn mask(&self) -> Option<TransitionMask> {
        self.config.bio_mask.then(|| TransitionMask::bio(&self.vocabs.tags))
    }

    /// Sense renderings for `tokens`, from the sentence when present, else by disambiguation.
    fn sense_renderings(&self, s: &LabeledSentence) -> Vec<String> {
        match (&s.senses, &self.senses) {
            (Some(r), _) if r.len() == s.len() => r.clone(),
            (_, Some(inv)) => retag_tokens(&s.tokens, inv, inv.window),
            _ => s.tokens.iter().map(|t| format!("{t}_1")).collect(),
        }
    }

    fn sense_id(&self, rendered: &str) -> usize {
        let vocab = &self.vocabs.senses;
        let (surface, k) = match SenseTaggedToken::parse(rendered) {
            Some(t) => (t.surface, t.sense),
            None => (rendered.to_string(), 1),
        };
        let key = word_key(&surface, false);
        vocab
            .get(&format!("{key}_{k}"))
            .or_else(|| vocab.get(&format!("{key}_1")))
            .unwrap_or(crate::corpus::UNK)
    }

    pub fn features(&self, s: &LabeledSentence) -> Result<Features<T>> {
        let m = s.len();
        if m == 0 {
            return Err(Error::Empty);
        }
        let cfg = &self.config;
        let words = s.tokens.iter().map(|t| self.vocabs.words.lookup(&word_key(t, cfg.lowercase))).collect();
        let mut chars = Vec::with_capacity(m);
        let (mut stream, mut starts, mut ends) = (Vec::new(), Vec::with_capacity(m), Vec::with_capacity(m));
        if cfg.needs_chars() {
            let boundary = self.vocabs.chars.lookup(BOUNDARY_CHAR);
            for (i, t) in s.tokens.iter().enumerate() {
                let mut ids: Vec<usize> = t.chars().map(|ch| self.vocabs.chars.lookup(&ch.to_string())).collect();
                if ids.is_empty() {
                    ids.push(crate::corpus::UNK);
                }
                if i > 0 {
                    stream.push(boundary);
                }
                starts.push(stream.len());
                stream.extend(&ids);
                ends.push(stream.len() - 1);
                chars.push(ids);
            }
        }
        let senses = if cfg.use_sense {
            self.sense_renderings(s).iter().map(|r| self.sense_id(r)).collect()
        } else {
            Vec::new()
        };
        let mut spelling = Vec::with_capacity(m * NUM_SPELLING);
        let mut suffix = Vec::with_capacity(m * NUM_SUFFIXES);
        for (i, t) in s.tokens.iter().enumerate() {
            spelling.extend(spelling_vector(t, i, m).to_f64().map(T::lit));
            match &self.suffixes {
                Some(inv) if cfg.use_suffix => {
                    suffix.extend(inv.vector(t).map(|b| if b { T::one() } else { T::zero() }))
                }
                _ => suffix.extend([T::zero(); NUM_SUFFIXES]),
            }
        }
        Ok(Features {
            words,
            chars,
            stream,
            starts,
            ends,
            senses,
            spelling: Tensor::new(vec![m, NUM_SPELLING], spelling)?,
            suffix: Tensor::new(vec![m, NUM_SUFFIXES], suffix)?,
        })
    }

    /// Gold tag indices; unknown tags are a data error.
    pub fn gold(&self, s: &LabeledSentence) -> Result<Vec<usize>> {
        s.tags
            .iter()
            .map(|t| {
                self.vocabs
                    .tag_index(t)
                    .ok_or_else(|| Error::Mismatch(format!("tag {t:?} not in the model's tag set")))
            })
            .collect()
    }

    fn char_encodings(&self, g: &mut Graph<'_, T>, f: &Features<T>) -> Result<Option<NodeId>> {
        let Some((table, lstm)) = &self.params.char_enc else { return Ok(None) };
        let t = g.param(*table);
        let rows = f
            .chars
            .iter()
            .map(|w| char_word_encoding(g, w, t, lstm))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(g.stack_rows(&rows)?))
    }

    /// Emission node `[m, c]` for one sentence.
    pub fn emissions_node(
        &self,
        g: &mut Graph<'_, T>,
        f: &Features<T>,
        prev: PrevTags<'_>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let m = f.len();
        let char_enc = in_branch("char", self.char_encodings(g, f))?;
        let spelling = g.input(f.spelling.clone());
        let suffix = g.input(f.suffix.clone());

        let mut outputs = Vec::new();
        if let Some(enc) = &self.params.word {
            let out = in_branch("word", (|| {
                let emb = g.param(enc.emb);
                let mut parts = vec![g.gather(emb, &f.words)?];
                if let (Some(ce), Placement::ConcatWord) = (char_enc, cfg.char_placement) {
                    parts.push(ce);
                }
                if cfg.use_suffix && cfg.suffix_placement == Placement::ConcatWord {
                    parts.push(suffix);
                }
                if cfg.use_spelling && cfg.spelling_placement == Placement::ConcatWord {
                    parts.push(spelling);
                }
                let x = g.concat_cols(&parts)?;
                let x = dropout_node(g, x, cfg.dropout, mode, rng)?;
                run_stack(g, x, enc)
            })())?;
            outputs.push((Branch::Word, out));
        }
        if let Some(enc) = &self.params.sp {
            let out = in_branch("sp-clstm", (|| {
                let table = g.param(enc.emb);
                let (fwd, bwd) = &enc.layers[0];
                let picked = selective_pickup(g, &f.stream, &f.ends, &f.starts, fwd, bwd, table)?;
                match enc.proj {
                    Some((w, b)) => {
                        let (w, b) = (g.param(w), g.param(b));
                        g.linear(picked, w, Some(b))
                    }
                    None => Ok(picked),
                }
            })())?;
            outputs.push((Branch::SpClstm, out));
        }
        if let Some(enc) = &self.params.sense {
            let out = in_branch("sense", (|| {
                let emb = g.param(enc.emb);
                let x = g.gather(emb, &f.senses)?;
                run_stack(g, x, enc)
            })())?;
            outputs.push((Branch::Sense, out));
        }
        if let Some((enc, kernel)) = &self.params.bigram {
            let out = in_branch("bigram", (|| {
                let emb = g.param(enc.emb);
                let padded: Vec<usize> = std::iter::once(START).chain(f.words.iter().copied()).collect();
                let x = g.gather(emb, &padded)?;
                let k = g.param(kernel.kernel);
                let b = bigram_conv(g, x, k)?;
                run_stack(g, b, enc)
            })())?;
            outputs.push((Branch::Bigram, out));
        }

        for (branch, out) in &outputs {
            let shape = g.value(*out).shape();
            if shape != [m, cfg.word_dim] {
                return Err(Error::Branch {
                    branch: branch.name(),
                    source: Box::new(Error::Shape(format!("output {shape:?}, expected [{m}, {}]", cfg.word_dim))),
                });
            }
        }
        let outs: Vec<NodeId> = outputs.iter().map(|&(_, o)| o).collect();
        let weights: Vec<NodeId> = self.params.fusion.iter().map(|&(_, w)| g.param(w)).collect();
        let mut fused = fuse(g, &outs, &weights)?;
        if let Some((w, b)) = self.params.spelling_res {
            let (w, b) = (g.param(w), g.param(b));
            let r = g.linear(spelling, w, Some(b))?;
            fused = g.add(fused, r)?;
        }

        in_branch("decode", (|| {
            let hs = crate::layers::run_lstm(g, fused, &self.params.head, false)?;
            let t = g.stack_rows(&hs)?;
            let t = g.tanh(t);
            let t = dropout_node(g, t, cfg.dropout, mode, rng)?;
            let mut parts = vec![t];
            if cfg.use_spelling && cfg.spelling_placement == Placement::ConcatOutput {
                parts.push(spelling);
            }
            if cfg.use_suffix && cfg.suffix_placement == Placement::ConcatOutput {
                parts.push(suffix);
            }
            if let (Some(ce), Placement::ConcatOutput) = (char_enc, cfg.char_placement) {
                parts.push(ce);
            }
            if let Some(table) = self.params.tag_emb {
                let e = match prev {
                    PrevTags::Blank => g.input(Tensor::zeros(&[m, cfg.tag_emb_dim])),
                    PrevTags::Tags(tags) => {
                        if tags.len() != m {
                            return Err(Error::Shape(format!("{} previous tags for {m} tokens", tags.len())));
                        }
                        let c = self.num_tags();
                        let ids: Vec<usize> = std::iter::once(c).chain(tags[..m - 1].iter().copied()).collect();
                        let table = g.param(table);
                        g.gather(table, &ids)?
                    }
                };
                parts.push(e);
            }
            let x = g.concat_cols(&parts)?;
            let (w, b) = (g.param(self.params.fc.0), g.param(self.params.fc.1));
            g.linear(x, w, Some(b))
        })())
    }

    /// Emission scores in evaluation mode.
    pub fn emissions(&self, f: &Features<T>, prev: PrevTags<'_>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = self.emissions_node(&mut g, f, prev, Mode::Eval, &mut rng)?;
        Ok(g.value(e).clone())
    }

    /// CRF negative log-likelihood node (teacher-forced previous tags).
    pub fn loss_node(
        &self,
        g: &mut Graph<'_, T>,
        f: &Features<T>,
        gold: &[usize],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let e = self.emissions_node(g, f, PrevTags::Tags(gold), mode, rng)?;
        let (a, s, en) = self.params.crf;
        let (a, s, en) = (g.param(a), g.param(s), g.param(en));
        let mask = self.mask();
        nll_node(g, e, a, s, en, gold, mask.as_ref())
    }

    /// Loss and gradients for one sentence; dropout randomness comes from `seed`.
    pub fn loss_and_grads(&self, f: &Features<T>, gold: &[usize], mode: Mode, seed: u64) -> Result<(T, Gradients<T>)> {
        self.loss_and_grads_in(&self.store, f, gold, mode, seed)
    }

    /// As [`Tagger::loss_and_grads`] but reading parameters from `store`
    /// (which must share this tagger's layout).
    pub fn loss_and_grads_in(
        &self,
        store: &ParamStore<T>,
        f: &Features<T>,
        gold: &[usize],
        mode: Mode,
        seed: u64,
    ) -> Result<(T, Gradients<T>)> {
        let mut g = Graph::new(store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = self.loss_node(&mut g, f, gold, mode, &mut rng)?;
        let value = g.value(loss).item();
        Ok((value, g.backward(loss)?))
    }

    /// Viterbi tags; with the previous-tag feature, a blank first pass feeds a second one.
    pub fn predict_features(&self, f: &Features<T>) -> Result<Vec<usize>> {
        let crf = self.crf_params();
        let first = viterbi_decode(&self.emissions(f, PrevTags::Blank)?, &crf)?.0;
        if !self.config.use_prev_tag {
            return Ok(first);
        }
        Ok(viterbi_decode(&self.emissions(f, PrevTags::Tags(&first))?, &crf)?.0)
    }

    pub fn predict(&self, s: &LabeledSentence) -> Result<Vec<String>> {
        let ids = self.predict_features(&self.features(s)?)?;
        Ok(ids.into_iter().map(|i| self.vocabs.tags[i].clone()).collect())
    }
}

/// Summary of the sense inventory a checkpoint was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SenseHeader {
    pub words: usize,
    pub max_senses: usize,
    pub dim: usize,
    pub window: usize,
    pub fingerprint: String,
    /// Inventory file name, relative to the checkpoint's directory.
    pub file: String,
}

impl SenseHeader {
    fn of(inv: &SenseInventory, file: String) -> Self {
        SenseHeader {
            words: inv.len(),
            max_senses: inv.max_senses,
            dim: inv.dim,
            window: inv.window,
            fingerprint: format!("{:016x}", inv.fingerprint()),
            file,
        }
    }

    fn check(&self, inv: &SenseInventory) -> Result<()> {
        let other = SenseHeader::of(inv, self.file.clone());
        if &other != self {
            return Err(Error::Mismatch(format!(
                "sense inventory ({} words, K={}, dim {}, {}) does not match the checkpoint ({} words, K={}, dim {}, {})",
                other.words, other.max_senses, other.dim, other.fingerprint, self.words, self.max_senses, self.dim,
                self.fingerprint
            )));
        }
        Ok(())
    }
}

/// Sidecar stored next to a checkpoint as `<checkpoint>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    pub suffixes: Option<SuffixInventory>,
    pub senses: Option<SenseHeader>,
    pub precision: u8,
}

impl ModelMeta {
    /// Reads the metadata sidecar of `checkpoint`.
    pub fn read(checkpoint: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(meta_path(checkpoint.as_ref()))?)?)
    }
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn senses_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".senses");
    PathBuf::from(s)
}

impl<T: Scalar> Tagger<T> {
    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config.clone(),
            vocabs: self.vocabs.clone(),
            suffixes: self.suffixes.clone(),
            senses: None,
            precision: T::BYTES,
        }
    }

    /// Writes the checkpoint, its metadata sidecar and (with the sense branch) the sense inventory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(&self.store, path)?;
        let mut meta = self.meta();
        if let (true, Some(inv)) = (self.config.use_sense, &self.senses) {
            let sp = senses_path(path);
            inv.save(&sp)?;
            let file = sp.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            meta.senses = Some(SenseHeader::of(inv, file));
        }
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Tagger::save`]. `senses` overrides the
    /// inventory file recorded in the metadata; it must match the recorded header.
    pub fn load(path: impl AsRef<Path>, senses: Option<&Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta = ModelMeta::read(path)?;
        if meta.precision != T::BYTES {
            return Err(Error::Mismatch(format!(
                "checkpoint stores {}-byte values, loading as {}-byte",
                meta.precision,
                T::BYTES
            )));
        }
        let inventory = match &meta.senses {
            Some(header) => {
                let file = match senses {
                    Some(p) => p.to_path_buf(),
                    None => path.parent().unwrap_or(Path::new(".")).join(&header.file),
                };
                let inv = SenseInventory::load(file)?;
                header.check(&inv)?;
                Some(inv)
            }
            None => None,
        };
        let mut tagger = Tagger::new(meta.config, meta.vocabs, meta.suffixes, inventory, 0)?;
        let loaded = load_checkpoint::<T>(path)?;
        restore_into(&mut tagger.store, &loaded)?;
        Ok(tagger)
    }
}
