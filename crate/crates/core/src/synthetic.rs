//! Seeded synthetic corpora with known generating rules.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::LabeledSentence;

pub const AMBIGUOUS_WORD: &str = "bank";

/// Sentences of eight topic words plus one target token.
///
/// Topic 0 draws from finance words, topic 1 from river words. When
/// `polysemous` the target is always "bank" and a fifth of the filler comes
/// from shared generic words; otherwise the target is "bank" (finance) or
/// "shore" (river) and every word has a single context distribution.
/// Returns the sentences and each sentence's topic.
pub fn polysemy_sentences(n: usize, polysemous: bool, seed: u64) -> (Vec<Vec<String>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fin: Vec<String> = (0..10).map(|i| format!("fin{i}")).collect();
    let riv: Vec<String> = (0..10).map(|i| format!("riv{i}")).collect();
    let gen: Vec<String> = (0..6).map(|i| format!("gen{i}")).collect();
    let mut sents = Vec::with_capacity(n);
    let mut topics = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.gen_range(0..2);
        let topic = if t == 0 { &fin } else { &riv };
        let generic = if polysemous { 0.2 } else { 0.0 };
        let mut toks: Vec<String> = (0..8)
            .map(|_| {
                if rng.gen::<f64>() < generic {
                    gen[rng.gen_range(0..gen.len())].clone()
                } else {
                    topic[rng.gen_range(0..topic.len())].clone()
                }
            })
            .collect();
        let target = if polysemous || t == 0 { AMBIGUOUS_WORD } else { "shore" };
        toks.insert(rng.gen_range(0..=toks.len()), target.to_string());
        sents.push(toks);
        topics.push(t);
    }
    (sents, topics)
}

/// Suffix → tag rule of the suffix-rule corpus; closed-class words are `DT`.
pub const SUFFIX_RULE: [(&str, &str); 4] = [("ing", "VBG"), ("ed", "VBD"), ("ly", "RB"), ("ness", "NN")];
pub const DETERMINERS: [&str; 5] = ["the", "a", "this", "that", "every"];

const STEMS: [&str; 40] = [
    "walk", "jump", "talk", "play", "climb", "paint", "float", "rest", "dream", "sketch", "bold", "quick", "soft",
    "warm", "bright", "calm", "dark", "fair", "kind", "loud", "mild", "neat", "plain", "rough", "sharp", "thick",
    "vast", "wild", "brisk", "crisp", "dull", "firm", "glad", "harsh", "keen", "lush", "pale", "quiet", "stark",
    "swift",
];

fn rule_token(rng: &mut ChaCha8Rng, stems: &[&str]) -> (String, String) {
    let r = rng.gen_range(0..5);
    if r == 4 {
        let d = DETERMINERS[rng.gen_range(0..DETERMINERS.len())];
        return (d.to_string(), "DT".to_string());
    }
    let (suffix, tag) = SUFFIX_RULE[r];
    let stem = stems[rng.gen_range(0..stems.len())];
    (format!("{stem}{suffix}"), tag.to_string())
}

/// `n` sentences of 5–9 tokens whose tags are fixed by the token's suffix.
pub fn suffix_rule_corpus(n: usize, seed: u64) -> Vec<LabeledSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(5..10);
            let (tokens, tags) = (0..len).map(|_| rule_token(&mut rng, &STEMS[..20])).unzip();
            LabeledSentence::new(tokens, tags).expect("non-empty")
        })
        .collect()
}

/// Tagging corpus combining sense ambiguity with suffix-determined tags.
///
/// Each sentence has a topic; "bank" is tagged `NN` in finance sentences and
/// `VB` in river sentences, topic words are tagged by topic (`FIN`/`RIV`),
/// and the remaining tokens follow the suffix rule. Validation and test
/// sentences draw half of their suffixed words from stems never seen in
/// training, so only sub-word features can tag them reliably.
pub fn polysemy_suffix_corpus(n_train: usize, n_eval: usize, seed: u64) -> (Vec<LabeledSentence>, Vec<LabeledSentence>, Vec<LabeledSentence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stems = STEMS.to_vec();
    stems.shuffle(&mut rng);
    let (seen, unseen) = stems.split_at(28);
    let make = |n: usize, eval: bool, rng: &mut ChaCha8Rng| -> Vec<LabeledSentence> {
        (0..n)
            .map(|_| {
                let topic = rng.gen_range(0..2);
                let len = rng.gen_range(6..11);
                let mut tokens = Vec::with_capacity(len + 1);
                let mut tags = Vec::with_capacity(len + 1);
                for _ in 0..len {
                    if rng.gen::<f64>() < 0.4 {
                        let (w, t) = if topic == 0 { ("fin", "FIN") } else { ("riv", "RIV") };
                        tokens.push(format!("{w}{}", rng.gen_range(0..8)));
                        tags.push(t.to_string());
                    } else {
                        let pool = if eval && rng.gen_bool(0.5) { unseen } else { seen };
                        let (w, t) = rule_token(rng, pool);
                        tokens.push(w);
                        tags.push(t);
                    }
                }
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, AMBIGUOUS_WORD.to_string());
                tags.insert(at, if topic == 0 { "NN" } else { "VB" }.to_string());
                LabeledSentence::new(tokens, tags).expect("non-empty")
            })
            .collect()
    };
    let train = make(n_train, false, &mut rng);
    let valid = make(n_eval, true, &mut rng);
    let test = make(n_eval, true, &mut rng);
    (train, valid, test)
}
