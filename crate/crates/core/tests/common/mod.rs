#![allow(dead_code)]

use seqtag::corpus::LabeledSentence;
use seqtag::model::{ModelConfig, Placement};
use seqtag::morph::{build_suffix_inventory, default_suffix_list, SuffixInventory};
use seqtag::senses::{train_senses, SenseConfig, SenseInventory};

/// Small dimensions so gradient checks and property tests stay fast.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        word_dim: 6,
        char_emb_dim: 3,
        char_hidden: 3,
        sp_hidden: 2,
        decode_hidden: 4,
        tag_emb_dim: 2,
        dropout: 0.0,
        ..Default::default()
    }
}

pub fn all_branches() -> ModelConfig {
    ModelConfig { use_bigram: true, ..tiny_config() }
}

pub fn alternate_placements() -> ModelConfig {
    ModelConfig {
        use_bigram: true,
        suffix_placement: Placement::ConcatOutput,
        spelling_placement: Placement::Residual,
        char_placement: Placement::ConcatOutput,
        lstm_layers: 2,
        hidden_size: Some(2),
        ..tiny_config()
    }
}

pub fn three_tag_corpus() -> Vec<LabeledSentence> {
    let rows: [(&[&str], &[&str]); 4] = [
        (&["The", "bank", "closed"], &["A", "B", "C"]),
        (&["a", "river", "bank", "flooded", "slowly"], &["A", "B", "B", "C", "C"]),
        (&["Money", "walked", "2024"], &["B", "C", "A"]),
        (&["the", "walking", "bank's", "quietly", "."], &["A", "C", "B", "C", "A"]),
    ];
    rows.iter().map(|(t, g)| LabeledSentence::from_strs(t, g).unwrap()).collect()
}

pub fn suffixes_for(train: &[LabeledSentence]) -> SuffixInventory {
    let toks: Vec<&str> = train.iter().flat_map(|s| s.tokens.iter().map(String::as_str)).collect();
    build_suffix_inventory(toks, &default_suffix_list(), 1).unwrap()
}

pub fn senses_for(train: &[LabeledSentence], dim: usize) -> SenseInventory {
    let toks: Vec<Vec<String>> = train.iter().map(|s| s.tokens.clone()).collect();
    let cfg = SenseConfig { dim, epochs: 3, ..Default::default() };
    train_senses(&toks, &cfg).unwrap().0
}
