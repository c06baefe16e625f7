//! Reversible character-level tokenizer with a fixed reserved block.
//!
//! Reserved ids come first and never move: pad, end, unk, the intra-span
//! delimiter, then `⟨extra_0⟩ .. ⟨extra_99⟩`. Every other symbol is a single
//! Unicode scalar value.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const END_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const DELIM_ID: u32 = 3;
pub const NUM_SENTINELS: usize = 100;
pub const FIRST_SENTINEL_ID: u32 = 4;
pub const NUM_RESERVED: usize = FIRST_SENTINEL_ID as usize + NUM_SENTINELS;

pub const PAD: &str = "⟨pad⟩";
pub const END: &str = "⟨end⟩";
pub const UNK: &str = "⟨unk⟩";
pub const DELIM: &str = "⟨sep⟩";

/// Text form of sentinel `n`.
pub fn sentinel(n: usize) -> String {
    format!("⟨extra_{n}⟩")
}

pub fn sentinel_id(n: usize) -> u32 {
    assert!(n < NUM_SENTINELS, "sentinel index out of range");
    FIRST_SENTINEL_ID + n as u32
}

/// Index of the sentinel with this token id, if it is one.
pub fn sentinel_index(id: u32) -> Option<usize> {
    (FIRST_SENTINEL_ID..FIRST_SENTINEL_ID + NUM_SENTINELS as u32)
        .contains(&id)
        .then(|| (id - FIRST_SENTINEL_ID) as usize)
}

/// Parses a reserved literal at the start of `s`, returning its id and byte
/// length.
pub fn match_reserved(s: &str) -> Option<(u32, usize)> {
    if !s.starts_with('⟨') {
        return None;
    }
    let close = s.find('⟩')?;
    let lit = &s[..close + '⟩'.len_utf8()];
    let id = match lit {
        PAD => PAD_ID,
        END => END_ID,
        UNK => UNK_ID,
        DELIM => DELIM_ID,
        _ => {
            let n: usize = lit.strip_prefix("⟨extra_")?.strip_suffix('⟩')?.parse().ok()?;
            if n >= NUM_SENTINELS || lit != sentinel(n) {
                return None;
            }
            sentinel_id(n)
        }
    };
    Some((id, lit.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabConfig {
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_count: 1 }
    }
}

/// Result of encoding: ids plus how many characters fell back to unk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub unknown: usize,
}

impl Encoded {
    pub fn is_lossless(&self) -> bool {
        self.unknown == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    char_ids: HashMap<char, u32>,
}

impl Vocab {
    /// Reserved block plus every character seen at least `min_count` times,
    /// ordered by code point.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, config: VocabConfig) -> Self {
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for t in texts {
            let mut rest = t;
            while let Some(c) = rest.chars().next() {
                if let Some((_, len)) = match_reserved(rest) {
                    rest = &rest[len..];
                    continue;
                }
                *counts.entry(c).or_default() += 1;
                rest = &rest[c.len_utf8()..];
            }
        }
        let chars = counts.into_iter().filter(|&(_, n)| n >= config.min_count.max(1)).map(|(c, _)| c);
        Self::from_chars(chars)
    }

    fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut symbols: Vec<String> = [PAD, END, UNK, DELIM].iter().map(|s| s.to_string()).collect();
        symbols.extend((0..NUM_SENTINELS).map(sentinel));
        let mut char_ids = HashMap::new();
        for c in chars {
            char_ids.insert(c, symbols.len() as u32);
            symbols.push(c.to_string());
        }
        Self { symbols, char_ids }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id_of_char(&self, c: char) -> Option<u32> {
        self.char_ids.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Encoded {
        let mut ids = Vec::with_capacity(text.len());
        let mut unknown = 0;
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if let Some((id, len)) = match_reserved(rest) {
                ids.push(id);
                rest = &rest[len..];
                continue;
            }
            match self.char_ids.get(&c) {
                Some(&id) => ids.push(id),
                None => {
                    ids.push(UNK_ID);
                    unknown += 1;
                }
            }
            rest = &rest[c.len_utf8()..];
        }
        Encoded { ids, unknown }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.symbol(id).unwrap_or(UNK));
        }
        out
    }

    /// One symbol per line, reserved block first; `\n`, `\r` and `\\` are
    /// backslash-escaped.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sym in &self.symbols {
            let escaped = sym.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r");
            writeln!(s, "{escaped}").expect("writing to a String cannot fail");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.split('\n').collect();
        let lines = match lines.last() {
            Some(&"") => &lines[..lines.len() - 1],
            _ => &lines[..],
        };
        if lines.len() < NUM_RESERVED {
            return Err(Error::Config("vocab file is missing the reserved block".into()));
        }
        let fresh = Self::from_chars(std::iter::empty());
        for (i, line) in lines[..NUM_RESERVED].iter().enumerate() {
            if *line != fresh.symbols[i] {
                return Err(Error::Config(format!("vocab line {}: expected reserved symbol {}", i + 1, fresh.symbols[i])));
            }
        }
        let mut chars = Vec::new();
        for (i, line) in lines[NUM_RESERVED..].iter().enumerate() {
            let sym = unescape(line);
            let mut it = sym.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Config(format!(
                        "vocab line {}: expected a single character",
                        i + NUM_RESERVED + 1
                    )))
                }
            }
        }
        let vocab = Self::from_chars(chars);
        if vocab.char_ids.len() != vocab.symbols.len() - NUM_RESERVED {
            return Err(Error::Config("vocab file contains duplicate symbols".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_corpus_contains_its_characters() {
        let v = Vocab::build(["ab ab"], VocabConfig::default());
        for c in ['a', 'b', ' '] {
            assert!(v.id_of_char(c).is_some());
        }
        assert_eq!(v.len(), NUM_RESERVED + 3);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let texts = ["the cat", "sat on ⟨extra_3⟩ mat", "窃取财物"];
        assert_eq!(Vocab::build(texts, VocabConfig::default()), Vocab::build(texts, VocabConfig::default()));
    }

    #[test]
    fn sentinels_are_reserved_regardless_of_corpus() {
        let v = Vocab::build(["x"], VocabConfig::default());
        for n in 0..NUM_SENTINELS {
            assert_eq!(v.encode(&sentinel(n)).ids, vec![sentinel_id(n)]);
        }
        assert_eq!(v.encode("⟨extra_0⟩").ids, vec![FIRST_SENTINEL_ID]);
    }

    #[test]
    fn min_count_filters_rare_characters() {
        let v = Vocab::build(["aab"], VocabConfig { min_count: 2 });
        assert!(v.id_of_char('a').is_some());
        assert!(v.id_of_char('b').is_none());
    }

    #[test]
    fn unseen_glyph_maps_to_unk_and_is_flagged() {
        let v = Vocab::build(["abc"], VocabConfig::default());
        let enc = v.encode("abz");
        assert_eq!(enc.ids[2], UNK_ID);
        assert_eq!(enc.unknown, 1);
        assert!(!enc.is_lossless());
        assert_ne!(v.decode(&enc.ids), "abz");
    }

    #[test]
    fn malformed_literals_are_plain_characters() {
        let v = Vocab::build(["⟨extra_100⟩ ⟨extra_07⟩"], VocabConfig::default());
        let text = "⟨extra_100⟩";
        let enc = v.encode(text);
        assert!(enc.ids.len() > 1);
        assert_eq!(v.decode(&enc.ids), text);
    }

    #[test]
    fn vocab_file_round_trips_with_escapes() {
        let v = Vocab::build(["a\\b\nc\r d"], VocabConfig::default());
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn no_plain_symbol_maps_into_reserved_block() {
        let v = Vocab::build(["hello ⟨sep⟩ world ⟨extra_5⟩"], VocabConfig::default());
        assert!(v.char_ids.values().all(|&id| id as usize >= NUM_RESERVED));
    }

    proptest! {
        #[test]
        fn encode_decode_identity_on_in_vocab_text(s in "[a-z0-9 _.,]{0,40}", k in 0usize..100) {
            let text = format!("{s}{}{s}{DELIM}", sentinel(k));
            let v = Vocab::build([text.as_str()], VocabConfig::default());
            let enc = v.encode(&text);
            prop_assert!(enc.is_lossless());
            prop_assert_eq!(v.decode(&enc.ids), text);
        }
    }
}
