//! Word-level vocabularies for the translation model and a piece-level
//! tokenizer for the context provider.
//!
//! The two deliberately segment the same sentence differently: the word
//! vocabulary yields one token per word while the piece tokenizer yields one
//! piece per character, so provider sequences are always longer.

use std::collections::{BTreeSet, HashMap};

use crate::error::{invalid, Result};

/// Marks the first piece of a word so that detokenization can restore spaces.
pub const WORD_START: char = '\u{2581}';

/// Token ids plus the index of the source word each token came from
/// (`None` for special tokens).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub word_of: Vec<Option<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(invalid(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        for (i, s) in WordVocab::SPECIALS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*s) {
                return Err(invalid("vocabulary must start with the special tokens"));
            }
        }
        Ok(WordVocab { words, index })
    }

    /// Specials followed by every distinct word, sorted.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut any = false;
        for s in sentences {
            any = true;
            for w in s.split_whitespace() {
                seen.insert(w.to_string());
            }
        }
        if !any {
            return Err(invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut words: Vec<String> = WordVocab::SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(seen.into_iter().filter(|w| !WordVocab::SPECIALS.contains(&w.as_str())));
        WordVocab::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One id per whitespace-separated word; unknown words map to UNK.
    pub fn encode(&self, sentence: &str) -> TokenSequence {
        let ids: Vec<usize> = sentence
            .split_whitespace()
            .map(|w| self.id(w).unwrap_or(WordVocab::UNK))
            .collect();
        let word_of = (0..ids.len()).map(Some).collect();
        TokenSequence { ids, word_of }
    }

    /// Joins words, stopping at EOS and skipping the other specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = Vec::new();
        for &id in ids {
            if id == WordVocab::EOS {
                break;
            }
            if id < WordVocab::SPECIALS.len() && id != WordVocab::UNK {
                continue;
            }
            out.push(self.word(id).unwrap_or("<unk>"));
        }
        out.join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        WordVocab::from_words(text.lines().map(str::to_string).collect())
    }
}

/// Greedy longest-match piece tokenizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PieceTokenizer {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
}

impl PieceTokenizer {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const CLS: usize = 2;
    pub const SEP: usize = 3;
    pub const MASK: usize = 4;
    pub const SPECIALS: [&'static str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        for (i, s) in PieceTokenizer::SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(invalid("piece table must start with the special tokens"));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(invalid(format!("duplicate piece `{p}`")));
            }
        }
        let max_piece_chars = pieces[PieceTokenizer::SPECIALS.len()..]
            .iter()
            .map(|p| p.chars().count())
            .max()
            .unwrap_or(1);
        Ok(PieceTokenizer {
            pieces,
            index,
            max_piece_chars,
        })
    }

    /// Character pieces: every character seen, both word-initial and inner.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut chars = BTreeSet::new();
        let mut any = false;
        for s in sentences {
            any = true;
            chars.extend(s.chars().filter(|c| !c.is_whitespace() && *c != WORD_START));
        }
        if !any {
            return Err(invalid("cannot build pieces from an empty corpus"));
        }
        PieceTokenizer::from_alphabet(chars)
    }

    pub fn from_alphabet(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: BTreeSet<char> = chars.into_iter().collect();
        let mut pieces: Vec<String> = PieceTokenizer::SPECIALS.iter().map(|s| s.to_string()).collect();
        for &c in &chars {
            pieces.push(format!("{WORD_START}{c}"));
        }
        for &c in &chars {
            pieces.push(c.to_string());
        }
        PieceTokenizer::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < PieceTokenizer::SPECIALS.len()
    }

    /// Segments a sentence; characters with no matching piece become UNK.
    pub fn tokenize(&self, sentence: &str) -> TokenSequence {
        let mut ids = Vec::new();
        let mut word_of = Vec::new();
        for (w, word) in sentence.split_whitespace().enumerate() {
            let chars: Vec<char> = std::iter::once(WORD_START).chain(word.chars()).collect();
            let mut pos = 0;
            while pos < chars.len() {
                let longest = self.max_piece_chars.min(chars.len() - pos);
                let hit = (1..=longest).rev().find_map(|n| {
                    let cand: String = chars[pos..pos + n].iter().collect();
                    self.index.get(&cand).map(|&id| (id, n))
                });
                let (id, n) = hit.unwrap_or((PieceTokenizer::UNK, 1));
                // a lone word-start marker carries no content of its own
                if !(id == PieceTokenizer::UNK && chars[pos] == WORD_START && pos + 1 < chars.len()) {
                    ids.push(id);
                    word_of.push(Some(w));
                }
                pos += n;
            }
        }
        TokenSequence { ids, word_of }
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if PieceTokenizer::is_special(id) {
                continue;
            }
            if let Some(p) = self.piece(id) {
                s.push_str(p);
            }
        }
        s.replace(WORD_START, " ").trim_start().to_string()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        PieceTokenizer::from_pieces(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_vocab_round_trip() {
        let v = WordVocab::build(["ab cd", "cd ef ab"]).unwrap();
        assert_eq!(v.len(), 4 + 3);
        let t = v.encode("ef ab zz");
        assert_eq!(t.ids[2], WordVocab::UNK);
        assert_eq!(v.decode(&v.encode("ab ef").ids), "ab ef");
        assert_eq!(WordVocab::build(["cd ef ab", "ab cd"]).unwrap(), v);
        assert_eq!(WordVocab::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn word_is_one_token_but_several_pieces() {
        let words = WordVocab::build(["ab"]).unwrap();
        let pieces = PieceTokenizer::build(["ab"]).unwrap();
        assert_eq!(words.encode("ab").len(), 1);
        assert_eq!(pieces.tokenize("ab").len(), 2);
    }

    #[test]
    fn piece_round_trip_and_determinism() {
        let tok = PieceTokenizer::build(["abc de", "fa"]).unwrap();
        for s in ["abc de fa", "e", "fed cab a"] {
            let a = tok.tokenize(s);
            assert_eq!(a, tok.tokenize(s));
            assert_eq!(tok.detokenize(&a.ids), s);
        }
    }

    #[test]
    fn unknown_characters_become_unk() {
        let tok = PieceTokenizer::build(["ab"]).unwrap();
        let t = tok.tokenize("aXb");
        assert_eq!(t.ids.len(), 3);
        assert_eq!(t.ids[1], PieceTokenizer::UNK);
    }
}
