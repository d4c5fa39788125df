//! Closed word-level vocabulary and fixed-length tokenizer.
//!
//! Real CLIP uses byte-pair encoding; here the caption grammar is closed,
//! so a lower-cased whitespace tokenizer over an explicit word list is
//! exact. Sequences are padded to a fixed context length with [SOS] at the
//! front and [EOS] after the last word.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Default context length, matching the usual dual-encoder setting.
/// Toy configs typically use 16.
pub const DEFAULT_CONTEXT_LEN: usize = 77;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// id -> token string; ids 0..3 are PAD, SOS, EOS.
    tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub eos_pos: usize,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const SOS: usize = 1;
    pub const EOS: usize = 2;

    /// Build from the word list; specials are prepended. Duplicate words
    /// are rejected so every word maps to exactly one id.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> =
            [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN].iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if tokens.contains(&w) {
                return Err(Error::Config(alloc::format!("duplicate vocabulary word {w:?}")));
            }
            tokens.push(w);
        }
        Ok(Vocabulary { tokens })
    }

    /// Reconstruct from serialized lines (one token per line, line = id).
    pub fn from_lines<I, S>(lines: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tokens: Vec<String> = lines.into_iter().map(|l| l.as_ref().to_string()).collect();
        if tokens.len() < 3
            || tokens[Self::PAD] != PAD_TOKEN
            || tokens[Self::SOS] != SOS_TOKEN
            || tokens[Self::EOS] != EOS_TOKEN
        {
            return Err(Error::Config("vocabulary file missing special tokens".into()));
        }
        Ok(Vocabulary { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|s| s.as_str())
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        let w = word.to_lowercase();
        self.tokens.iter().position(|t| *t == w)
    }

    /// [SOS, word ids..., EOS, PAD...] of exactly `l_ctx` entries.
    pub fn tokenize(&self, text: &str, l_ctx: usize) -> Result<TokenizedText> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() > l_ctx.saturating_sub(2) {
            return Err(Error::ContextOverflow { words: words.len(), capacity: l_ctx });
        }
        let mut ids = Vec::with_capacity(l_ctx);
        ids.push(Self::SOS);
        for w in &words {
            match self.id_of(w) {
                Some(id) => ids.push(id),
                None => return Err(Error::UnknownToken((*w).to_string())),
            }
        }
        let eos_pos = ids.len();
        ids.push(Self::EOS);
        ids.resize(l_ctx, Self::PAD);
        Ok(TokenizedText { ids, eos_pos })
    }

    /// Word ids only (no specials/padding); used for template segments.
    pub fn word_ids(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id_of(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        // filler words push "a" to id 4, "red" to 7, "circle" to 9
        Vocabulary::from_words(["x0", "a", "x1", "x2", "red", "x3", "circle"]).unwrap()
    }

    #[test]
    fn empty_text_is_sos_eos_pad() {
        let v = vocab();
        let t = v.tokenize("", 8).unwrap();
        assert_eq!(t.ids, vec![1, 2, 0, 0, 0, 0, 0, 0]);
        assert_eq!(t.eos_pos, 1);
    }

    #[test]
    fn hand_traced_sentence() {
        let v = vocab();
        assert_eq!(v.id_of("a"), Some(4));
        assert_eq!(v.id_of("red"), Some(7));
        assert_eq!(v.id_of("circle"), Some(9));
        let t = v.tokenize("a red circle", 16).unwrap();
        assert_eq!(&t.ids[..6], &[1, 4, 7, 9, 2, 0]);
        assert_eq!(t.ids.len(), 16);
        assert_eq!(t.eos_pos, 4);
        assert_eq!(t.ids.iter().filter(|&&id| id == Vocabulary::EOS).count(), 1);
    }

    #[test]
    fn overflow_at_boundary() {
        let v = vocab();
        let l_ctx = 8;
        // l_ctx - 2 words fit exactly
        let fits = "a a a a a a";
        assert!(v.tokenize(fits, l_ctx).is_ok());
        // one more word (l_ctx - 1 total) must overflow
        let over = "a a a a a a a";
        assert!(matches!(
            v.tokenize(over, l_ctx),
            Err(Error::ContextOverflow { words: 7, capacity: 8 })
        ));
    }

    #[test]
    fn unknown_word_named_in_error() {
        let v = vocab();
        assert_eq!(
            v.tokenize("a blue circle", 16),
            Err(Error::UnknownToken("blue".into()))
        );
    }

    #[test]
    fn lowercasing_applies() {
        let v = vocab();
        let t = v.tokenize("A RED Circle", 16).unwrap();
        assert_eq!(&t.ids[..5], &[1, 4, 7, 9, 2]);
    }

    #[test]
    fn line_round_trip() {
        let v = vocab();
        let lines: Vec<&str> = v.lines().collect();
        let back = Vocabulary::from_lines(lines).unwrap();
        assert_eq!(v, back);
    }
}
