use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use seqtag::corpus::{batch_iter, format_conll, parse_conll, read_conll, split_tag, to_bio2, LabeledSentence};
use seqtag::metrics::{evaluate_accuracy, evaluate_span_f1, extract_spans};
use seqtag::morph::{build_suffix_inventory, default_suffix_list, spelling_vector, NUM_SUFFIXES};
use seqtag::synthetic::{polysemy_suffix_corpus, suffix_rule_corpus};

fn sentence() -> impl Strategy<Value = LabeledSentence> {
    prop::collection::vec(("[a-zA-Z0-9.'-]{1,8}", "[A-Z]{1,3}"), 1..12).prop_map(|pairs| {
        let (t, g): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        LabeledSentence::new(t, g).unwrap()
    })
}

fn bio_tag() -> impl Strategy<Value = String> {
    prop_oneof![Just("O".to_string()), "[BI]-(PER|LOC|ORG)"]
}

fn bio_seq() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(bio_tag(), 1..15)
}

proptest! {
    #[test]
    fn conll_roundtrip(sents in prop::collection::vec(sentence(), 0..6)) {
        let back = parse_conll(&format_conll(&sents), 0, 1, Path::new("mem")).unwrap();
        prop_assert_eq!(back, sents);
    }

    #[test]
    fn bio2_repair_is_idempotent_and_valid(tags in bio_seq()) {
        let fixed = to_bio2(&tags).unwrap();
        prop_assert_eq!(&to_bio2(&fixed).unwrap(), &fixed);
        for (i, t) in fixed.iter().enumerate() {
            let (p, ty) = split_tag(t).unwrap();
            if p == 'I' {
                prop_assert!(i > 0);
                let (_, prev_ty) = split_tag(&fixed[i - 1]).unwrap();
                prop_assert!(fixed[i - 1] != "O" && prev_ty == ty);
            }
        }
        prop_assert_eq!(extract_spans(&fixed).unwrap(), extract_spans(&tags).unwrap());
    }

    #[test]
    fn batches_partition_the_dataset(n in 0usize..200, b in 1usize..40, seed in any::<u64>()) {
        let batches = batch_iter(n, b, seed);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|x| !x.is_empty() && x.len() <= b));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batch_iter(n, b, seed), batches);
    }

    #[test]
    fn spelling_invariants(word in "\\PC{1,10}", len in 1usize..6, pos in 0usize..6) {
        let pos = pos % len;
        let v = spelling_vector(&word, pos, len);
        prop_assert_eq!([8, 9, 10].iter().filter(|&&n| v.item(n)).count(), 1);
        prop_assert!(!(v.item(4) && v.item(5)));
        prop_assert!(!v.item(13) || (v.item(8) && v.item(3)));
        prop_assert!(!v.item(6) || v.item(14));
        prop_assert!(!(v.item(1) && v.item(6)));
        prop_assert!(!v.item(4) || v.item(1));
    }

    #[test]
    fn suffix_vector_is_one_hot_or_zero(words in prop::collection::vec("[a-z]{1,10}", 1..80), threshold in 1usize..4) {
        let inv = build_suffix_inventory(words.iter().map(String::as_str), &default_suffix_list(), threshold).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in &words {
            *counts.entry(w).or_default() += 1;
        }
        for w in &words {
            let v = inv.vector(w);
            prop_assert!(v.iter().filter(|&&b| b).count() <= 1);
            if let Some(k) = v.iter().position(|&b| b) {
                prop_assert!(counts[w.as_str()] >= threshold);
                prop_assert!(w.len() > inv.suffixes[k].len() && w.ends_with(&inv.suffixes[k]));
            }
        }
        prop_assert_eq!(inv.suffixes.len(), NUM_SUFFIXES);
        prop_assert!(inv.counts.windows(2).all(|c| c[0] >= c[1]));
    }

    #[test]
    fn f1_is_harmonic_mean(gold in bio_seq(), noise in prop::collection::vec(bio_tag(), 15), flips in prop::collection::vec(any::<bool>(), 15)) {
        let pred: Vec<String> = gold.iter().enumerate().map(|(i, g)| if flips[i] { noise[i].clone() } else { g.clone() }).collect();
        let r = evaluate_span_f1(&[pred], &[gold]).unwrap();
        for x in [r.precision, r.recall, r.f1, r.accuracy] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        if r.precision + r.recall > 0.0 {
            prop_assert!((r.f1 - 2.0 * r.precision * r.recall / (r.precision + r.recall)).abs() < 1e-12);
        }
    }

    #[test]
    fn fixing_a_prediction_never_lowers_accuracy(gold in prop::collection::vec("[A-C]", 1..20), wrong in prop::collection::vec("[A-C]", 20), at in 0usize..20) {
        let pred: Vec<String> = gold.iter().zip(&wrong).map(|(_, w)| w.clone()).collect();
        let before = evaluate_accuracy(std::slice::from_ref(&pred), std::slice::from_ref(&gold)).unwrap();
        let mut fixed = pred;
        let i = at % gold.len();
        fixed[i] = gold[i].clone();
        prop_assert!(evaluate_accuracy(&[fixed], &[gold]).unwrap() >= before);
    }
}

#[test]
fn outside_tokens_do_not_affect_span_scores() {
    let gold = vec![vec!["B-PER", "I-PER", "O", "O"]];
    let pred = vec![vec!["B-PER", "I-PER", "O", "O"]];
    let a = evaluate_span_f1(&pred, &gold).unwrap();
    let gold2 = vec![vec!["B-PER", "I-PER", "O", "O", "O", "O"]];
    let pred2 = vec![vec!["B-PER", "I-PER", "O", "O", "O", "O"]];
    let b = evaluate_span_f1(&pred2, &gold2).unwrap();
    assert_eq!((a.f1, a.spans), (b.f1, b.spans));
}

fn shipped(name: &str) -> Vec<LabeledSentence> {
    read_conll(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/synthetic").join(name), 0, 1).unwrap()
}

#[test]
fn shipped_corpora_match_generators() {
    assert_eq!(shipped("suffix_rule.conll"), suffix_rule_corpus(50, 1));
    let (train, valid, test) = polysemy_suffix_corpus(150, 60, 1);
    assert_eq!(shipped("polysemy_train.conll"), train);
    assert_eq!(shipped("polysemy_valid.conll"), valid);
    assert_eq!(shipped("polysemy_test.conll"), test);
}
