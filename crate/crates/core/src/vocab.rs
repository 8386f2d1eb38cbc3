//! The 68-class character vocabulary shared by recognition and segmentation.
//!
//! Classes are ordered: 10 digits, 26 lowercase letters, then the 32 ASCII
//! punctuation marks in ASCII order. Letters are case-insensitive: uppercase
//! input folds to the lowercase class. Two index spaces hang off this list:
//!
//! * recognition: char classes 0..=67, EOS = 68 (69 logits);
//! * segmentation: background = 0, char classes 1..=68 (69 mask values).

use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub const NUM_CHAR_CLASSES: usize = 68;
/// Segmentation channels: background + one per character class.
pub const SEG_CLASSES: usize = NUM_CHAR_CLASSES + 1;
/// Recognition classes: characters + EOS.
pub const REC_CLASSES: usize = NUM_CHAR_CLASSES + 1;
pub const EOS: usize = NUM_CHAR_CLASSES;
/// Maximum label length in characters.
pub const T_MAX: usize = 32;

const DIGITS: &str = "0123456789";
const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
/// The 32 ASCII punctuation characters, in ASCII order.
const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

#[derive(Clone, Debug)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for CharVocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl CharVocab {
    pub fn standard() -> Self {
        let chars: Vec<char> =
            DIGITS.chars().chain(LETTERS.chars()).chain(PUNCTUATION.chars()).collect();
        debug_assert_eq!(chars.len(), NUM_CHAR_CLASSES);
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        CharVocab { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Class index of a character, folding uppercase letters.
    pub fn index_of(&self, c: char) -> Option<usize> {
        let c = if c.is_ascii_uppercase() { c.to_ascii_lowercase() } else { c };
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, i: usize) -> char {
        self.chars[i]
    }

    /// Character class sequence for a label (no EOS appended).
    pub fn encode(&self, label: &str) -> Result<Vec<usize>, char> {
        label.chars().map(|c| self.index_of(c).ok_or(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.char_of(i)).collect()
    }

    /// Lowercased form used everywhere downstream (masks, targets).
    pub fn fold_label(&self, label: &str) -> String {
        label.to_ascii_lowercase()
    }

    pub fn contains_label(&self, label: &str) -> bool {
        label.chars().all(|c| self.index_of(c).is_some())
    }

    /// Stable fingerprint of the class list (stored in dataset/checkpoint metadata).
    pub fn hash(&self) -> String {
        let joined: String = self.chars.iter().collect();
        let digest = Sha256::digest(joined.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_match_contract() {
        let v = CharVocab::standard();
        assert_eq!(v.len(), 68);
        assert_eq!(SEG_CLASSES, 69);
        assert_eq!(REC_CLASSES, 69);
        assert_eq!(EOS, 68);
    }

    #[test]
    fn round_trip_all_indices() {
        let v = CharVocab::standard();
        for i in 0..v.len() {
            assert_eq!(v.index_of(v.char_of(i)), Some(i), "class {i}");
        }
    }

    #[test]
    fn uppercase_folds_to_lowercase_class() {
        let v = CharVocab::standard();
        for (upper, lower) in ('A'..='Z').zip('a'..='z') {
            assert_eq!(v.index_of(upper), v.index_of(lower));
        }
        assert_eq!(v.encode("AB").unwrap(), v.encode("ab").unwrap());
    }

    #[test]
    fn out_of_vocab_rejected() {
        let v = CharVocab::standard();
        assert_eq!(v.index_of(' '), None);
        assert_eq!(v.index_of('é'), None);
        assert_eq!(v.encode("a b"), Err(' '));
    }

    #[test]
    fn hash_is_stable() {
        let a = CharVocab::standard();
        let b = CharVocab::standard();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
