//! Token vocabulary and text embedding.
//!
//! A fixed ~64-word scene vocabulary stands in for a full text encoder.
//! Prompts are limited to 75 words plus start/end markers, padded to exactly
//! 77 positions; unknown words fall back to a reserved UNK token.

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec::Vec;

pub const MAX_TOKENS: usize = 77;
pub const MAX_WORDS: usize = 75;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

/// Fixed vocabulary: specials, surface classes, tier tags, scene words.
pub const VOCAB: &[&str] = &[
    "<pad>", "<start>", "<end>", "<unk>", //
    "water", "field", "road", "building", "forest", //
    "sd160", "sd80", "sd40", //
    "bright", "dark", "dense", "sparse", "smooth", "rough", //
    "high", "low", "resolution", "sar", "scene", "image", //
    "aerial", "urban", "rural", "coastal", "industrial", "farmland", //
    "river", "lake", "bridge", "runway", "harbor", "town", //
    "village", "grid", "texture", "speckle", "terrain", "area", //
    "region", "north", "south", "east", "west", "large", //
    "small", "wide", "narrow", "long", "short", "many", //
    "few", "wet", "dry", "open", "closed", "near", //
    "far", "flat", "steep", "new",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

/// Id of a word, with UNK fallback.
pub fn token_id(word: &str) -> usize {
    VOCAB.iter().position(|w| *w == word).unwrap_or(UNK)
}

pub fn tokenize(words: &[&str]) -> Vec<usize> {
    words.iter().map(|w| token_id(w)).collect()
}

/// Lay out `[START, w_1..w_k, END, PAD…]` with k truncated to 75; the result
/// is always exactly 77 ids.
pub fn sequence_ids(word_ids: &[usize]) -> [usize; MAX_TOKENS] {
    let mut seq = [PAD; MAX_TOKENS];
    seq[0] = START;
    let k = word_ids.len().min(MAX_WORDS);
    seq[1..1 + k].copy_from_slice(&word_ids[..k]);
    seq[1 + k] = END;
    seq
}

/// Trainable token-embedding table (vocab × dim).
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedder {
    pub table: Tensor,
}

impl TextEmbedder {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let mut table = Tensor::randn(&[vocab_size(), dim], rng);
        table.scale(0.02);
        TextEmbedder { table }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// Deterministic lookup of a padded sequence: rows of the table in
    /// sequence order, shape [77, dim].
    pub fn embed_sequence(&self, seq: &[usize; MAX_TOKENS]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Tensor::zeros(&[MAX_TOKENS, d]);
        for (j, &id) in seq.iter().enumerate() {
            if id >= vocab_size() {
                return Err(invalid("embed_sequence", alloc::format!("token id {id} out of range")));
            }
            out.data_mut()[j * d..(j + 1) * d]
                .copy_from_slice(&self.table.data()[id * d..(id + 1) * d]);
        }
        Ok(out)
    }

    /// Embed a word-id prompt (markers and padding added here).
    pub fn embed_ids(&self, word_ids: &[usize]) -> Result<Tensor> {
        self.embed_sequence(&sequence_ids(word_ids))
    }

    /// Embed a plain word list; unknown words map to UNK.
    pub fn embed_text(&self, words: &[&str]) -> Result<Tensor> {
        self.embed_ids(&tokenize(words))
    }
}

/// Mean over the 77 token rows → [dim]. The denoiser conditions on this
/// pooled vector; PAD rows participate as a learned null embedding.
pub fn pool_tokens(emb: &Tensor) -> Result<Tensor> {
    let (n, d) = emb.dims2()?;
    let mut out = Tensor::zeros(&[d]);
    for j in 0..n {
        for i in 0..d {
            out.data_mut()[i] += emb.data()[j * d + i];
        }
    }
    out.scale(1.0 / n as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_has_no_duplicates() {
        for (i, a) in VOCAB.iter().enumerate() {
            for b in &VOCAB[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(VOCAB.len(), 64);
    }

    #[test]
    fn empty_prompt_layout() {
        let seq = sequence_ids(&[]);
        assert_eq!(seq[0], START);
        assert_eq!(seq[1], END);
        assert!(seq[2..].iter().all(|&id| id == PAD));
    }

    #[test]
    fn embedding_is_deterministic() {
        let mut rng = Rng::new(1);
        let emb = TextEmbedder::init(8, &mut rng);
        let a = emb.embed_text(&["field", "road"]).unwrap();
        let b = emb.embed_text(&["field", "road"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[77, 8]);
    }

    #[test]
    fn long_prompt_truncates_to_75_plus_markers() {
        let words: Vec<&str> = core::iter::repeat("field").take(80).collect();
        let ids = tokenize(&words);
        let seq = sequence_ids(&ids);
        assert_eq!(seq.len(), 77);
        assert_eq!(seq[0], START);
        assert_eq!(seq[76], END);
        assert!(seq[1..76].iter().all(|&id| id == token_id("field")));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        assert_eq!(token_id("zebra"), UNK);
        let mut rng = Rng::new(2);
        let emb = TextEmbedder::init(4, &mut rng);
        let a = emb.embed_text(&["zebra"]).unwrap();
        let b = emb.embed_ids(&[UNK]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pad_positions_carry_pad_embedding() {
        let mut rng = Rng::new(3);
        let emb = TextEmbedder::init(4, &mut rng);
        let e = emb.embed_text(&["water"]).unwrap();
        let d = 4;
        let pad_row = &emb.table.data()[PAD * d..(PAD + 1) * d];
        for j in 3..77 {
            assert_eq!(&e.data()[j * d..(j + 1) * d], pad_row);
        }
    }
}
