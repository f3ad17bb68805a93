//! Greedy longest-match tokenizer over a fixed unit vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::prompting::{
    ANSWER_LINE, CLAIM_PREFIX, EVIDENCE_HEADER, HINT_PREFIX, QUESTION_LINE, TIPS_PREFIX,
};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: HashMap<u8, usize>,
    unit: Option<u32>,
}

/// Maps text to unit ids; every printable ASCII character is a unit, so ASCII text always encodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    units: Vec<String>,
    trie: Vec<TrieNode>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    units: Vec<String>,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        Tokenizer::from_units(r.units)
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        TokenizerRepr { units: t.units }
    }
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.units == other.units
    }
}

/// Word-like pieces: an optional leading space, then an alphanumeric run or an apostrophe suffix.
fn pieces(text: &str) -> Vec<&str> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let start = i;
        let mut j = i;
        if b[j] == b' ' {
            j += 1;
        }
        if j < b.len() && b[j] == b'\'' {
            j += 1;
        }
        let body = j;
        while j < b.len() && b[j].is_ascii_alphanumeric() {
            j += 1;
        }
        if j > body {
            out.push(&text[start..j]);
            i = j;
        } else {
            i = start + 1;
        }
    }
    out
}

impl Tokenizer {
    /// Fixed units shared by every vocabulary: specials, template constants and printable ASCII.
    fn base_units() -> Vec<String> {
        let mut units: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        // Template constants minus any trailing space, so following words keep their leading space.
        for t in [
            CLAIM_PREFIX,
            EVIDENCE_HEADER,
            TIPS_PREFIX,
            QUESTION_LINE,
            HINT_PREFIX,
            ANSWER_LINE,
        ] {
            units.push(t.trim_end_matches(' ').to_string());
        }
        units.push("\n".to_string());
        units.extend((0x20u8..0x7f).map(|c| (c as char).to_string()));
        units
    }

    /// Builds a vocabulary from the most frequent word pieces (at least two occurrences).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_word_units: usize) -> Tokenizer {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for p in pieces(t) {
                if p.len() >= 2 {
                    *counts.entry(p).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= 2).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut units = Self::base_units();
        let existing: std::collections::HashSet<String> = units.iter().cloned().collect();
        units.extend(
            ranked
                .into_iter()
                .map(|(p, _)| p.to_string())
                .filter(|p| !existing.contains(p))
                .take(max_word_units),
        );
        Tokenizer::from_units(units)
    }

    pub fn from_units(units: Vec<String>) -> Tokenizer {
        let mut trie = vec![TrieNode::default()];
        for (id, u) in units.iter().enumerate().skip(SPECIALS.len()) {
            let mut node = 0;
            for &byte in u.as_bytes() {
                node = match trie[node].children.get(&byte) {
                    Some(&n) => n,
                    None => {
                        trie.push(TrieNode::default());
                        let n = trie.len() - 1;
                        trie[node].children.insert(byte, n);
                        n
                    }
                };
            }
            trie[node].unit.get_or_insert(id as u32);
        }
        Tokenizer { units, trie }
    }

    pub fn vocab_size(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn id_of(&self, unit: &str) -> Option<u32> {
        self.units.iter().position(|u| u == unit).map(|i| i as u32)
    }

    /// Greedy longest match; characters outside the vocabulary become UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let b = text.as_bytes();
        let mut out = Vec::with_capacity(b.len() / 3 + 1);
        let mut i = 0;
        while i < b.len() {
            let mut node = 0;
            let mut best: Option<(u32, usize)> = None;
            let mut j = i;
            while j < b.len() {
                match self.trie[node].children.get(&b[j]) {
                    Some(&n) => {
                        node = n;
                        j += 1;
                        if let Some(u) = self.trie[node].unit {
                            best = Some((u, j));
                        }
                    }
                    None => break,
                }
            }
            match best {
                Some((u, end)) => {
                    out.push(u);
                    i = end;
                }
                None => {
                    out.push(UNK);
                    let ch_len = text[i..].chars().next().map_or(1, char::len_utf8);
                    i += ch_len;
                }
            }
        }
        out
    }

    /// Concatenates unit strings; specials decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id as usize >= SPECIALS.len())
            .filter_map(|&id| self.units.get(id as usize))
            .map(String::as_str)
            .collect()
    }
}
