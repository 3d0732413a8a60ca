//! Spelling predicates and the suffix one-hot feature.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_SPELLING: usize = 14;
pub const NUM_SUFFIXES: usize = 10;
pub const DEFAULT_SUFFIX_THRESHOLD: usize = 5;

/// The 14 binary spelling features, in this order:
///
///  1. only alphabetic characters
///  2. contains a character that is neither a letter, a digit nor `.`
///  3. starts with an upper-case letter
///  4. only upper-case letters
///  5. only lower-case letters
///  6. only digits
///  7. mixes letters and digits
///  8. first word of the sentence
///  9. last word of the sentence (and not first)
/// 10. neither first nor last
/// 11. ends with `'s`
/// 12. contains punctuation
/// 13. first word and starts with an upper-case letter
/// 14. strictly more than half of the characters are digits
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpellingVector(pub [bool; NUM_SPELLING]);

impl SpellingVector {
    /// 1-based feature lookup, matching the numbering above.
    pub fn item(&self, n: usize) -> bool {
        self.0[n - 1]
    }

    pub fn set_items(&self) -> Vec<usize> {
        (1..=NUM_SPELLING).filter(|&n| self.item(n)).collect()
    }

    pub fn to_f64(&self) -> [f64; NUM_SPELLING] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

fn is_punct(ch: char) -> bool {
    ch.is_ascii_punctuation()
        || matches!(
            ch,
            '\u{2010}'..='\u{2027}' | '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{3001}' | '\u{3002}'
        )
}

pub fn spelling_vector(word: &str, position: usize, sentence_len: usize) -> SpellingVector {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    let letters = chars.iter().filter(|c| c.is_alphabetic()).count();
    let digits = chars.iter().filter(|c| c.is_ascii_digit()).count();
    let nonempty = n > 0;
    let starts_upper = chars.first().is_some_and(|c| c.is_uppercase());
    let first = position == 0;
    let last = !first && position + 1 == sentence_len;
    let lower = word.to_lowercase();

    let mut f = [false; NUM_SPELLING];
    f[0] = nonempty && letters == n;
    f[1] = chars.iter().any(|&c| !c.is_alphabetic() && !c.is_ascii_digit() && c != '.');
    f[2] = starts_upper;
    f[3] = nonempty && chars.iter().all(|c| c.is_alphabetic() && c.is_uppercase());
    f[4] = nonempty && chars.iter().all(|c| c.is_alphabetic() && c.is_lowercase());
    f[5] = nonempty && digits == n;
    f[6] = letters > 0 && digits > 0;
    f[7] = first;
    f[8] = last;
    f[9] = !first && !last;
    f[10] = n > 2 && (lower.ends_with("'s") || lower.ends_with("\u{2019}s"));
    f[11] = chars.iter().any(|&c| is_punct(c));
    f[12] = first && starts_upper;
    f[13] = 2 * digits > n;
    SpellingVector(f)
}

/// Reads a suffix list: one suffix per line, `#` starts a comment, a leading `-` is ignored.
pub fn load_suffix_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let list = parse_suffix_list(&text);
    if list.is_empty() {
        return Err(Error::Format(format!("suffix list {} is empty", path.display())));
    }
    Ok(list)
}

pub fn parse_suffix_list(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .map(|l| l.trim_start_matches('-').to_lowercase())
        .filter(|l| !l.is_empty() && seen.insert(l.clone()))
        .collect()
}

/// The suffix list shipped with the crate (137 common English suffixes).
pub fn default_suffix_list() -> Vec<String> {
    parse_suffix_list(include_str!("../data/suffixes.txt"))
}

/// The ten selected suffixes together with the word types admitted for each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixInventory {
    pub suffixes: Vec<String>,
    /// Occurrence count of tokens carrying each selected suffix.
    pub counts: Vec<usize>,
    /// Lower-cased word types admitted for each suffix.
    pub admitted: Vec<BTreeSet<String>>,
    pub threshold: usize,
}

/// True when `word` carries `suffix` as a proper suffix.
fn has_suffix(word: &str, suffix: &str) -> bool {
    word.len() > suffix.len() && word.ends_with(suffix)
}

/// Counts suffix occurrences over training tokens, keeps the ten most
/// frequent (ties: longer suffix, then lexicographic) and admits a word type
/// for a suffix when the type occurs at least `threshold` times.
pub fn build_suffix_inventory<'a, I>(tokens: I, suffix_list: &[String], threshold: usize) -> Result<SuffixInventory>
where
    I: IntoIterator<Item = &'a str>,
{
    if threshold == 0 {
        return Err(Error::Config("suffix threshold must be ≥ 1".into()));
    }
    if suffix_list.len() < NUM_SUFFIXES {
        return Err(Error::Config(format!(
            "suffix list has {} entries, need at least {NUM_SUFFIXES}",
            suffix_list.len()
        )));
    }
    let mut type_counts: HashMap<String, usize> = HashMap::new();
    for t in tokens {
        *type_counts.entry(t.to_lowercase()).or_default() += 1;
    }
    let types: BTreeMap<&str, usize> = type_counts.iter().map(|(k, &v)| (k.as_str(), v)).collect();

    let mut ranked: Vec<(&String, usize)> = suffix_list
        .iter()
        .map(|s| {
            let c = types.iter().filter(|(w, _)| has_suffix(w, s)).map(|(_, &c)| c).sum();
            (s, c)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.0.chars().count().cmp(&a.0.chars().count()))
            .then(a.0.cmp(b.0))
    });
    ranked.truncate(NUM_SUFFIXES);

    let admitted = ranked
        .iter()
        .map(|(s, _)| {
            types
                .iter()
                .filter(|(w, &c)| has_suffix(w, s) && c >= threshold)
                .map(|(w, _)| w.to_string())
                .collect()
        })
        .collect();
    Ok(SuffixInventory {
        suffixes: ranked.iter().map(|(s, _)| (*s).clone()).collect(),
        counts: ranked.iter().map(|&(_, c)| c).collect(),
        admitted,
        threshold,
    })
}

impl SuffixInventory {
    /// One-hot over the ten suffixes; the longest admitted suffix wins.
    pub fn vector(&self, word: &str) -> [bool; NUM_SUFFIXES] {
        let w = word.to_lowercase();
        let mut out = [false; NUM_SUFFIXES];
        let best = (0..self.suffixes.len())
            .filter(|&k| self.admitted[k].contains(&w))
            .max_by(|&a, &b| {
                self.suffixes[a]
                    .chars()
                    .count()
                    .cmp(&self.suffixes[b].chars().count())
                    .then(b.cmp(&a))
            });
        if let Some(k) = best {
            out[k] = true;
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let inv: SuffixInventory = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if inv.suffixes.len() != NUM_SUFFIXES || inv.admitted.len() != NUM_SUFFIXES {
            return Err(Error::Format("suffix inventory must hold exactly 10 suffixes".into()));
        }
        Ok(inv)
    }
}

pub fn suffix_vector(word: &str, inventory: &SuffixInventory) -> [bool; NUM_SUFFIXES] {
    inventory.vector(word)
}
