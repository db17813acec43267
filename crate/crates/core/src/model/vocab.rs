//! Fixed token vocabulary of the semantic pathway.

use crate::data::{CONCEPTS, MODALITIES};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const TOKENS: [&str; 16] = [
    "<pad>", "<bos>", "<eos>", "<unk>", "segment", "the", "in", "circle", "square", "triangle", "ring",
    "cross", "plain", "noisy", "low-contrast", "textured",
];

pub fn token_id(word: &str) -> Result<usize> {
    TOKENS.iter().position(|&t| t == word).ok_or_else(|| Error::Vocabulary(word.to_string()))
}

/// Whitespace tokenization against the fixed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(token_id).collect()
}

/// Text prompt `segment the <concept> in <modality>`.
pub fn prompt_text(concept_id: usize, modality_id: usize) -> Result<String> {
    let c = CONCEPTS.get(concept_id).ok_or_else(|| Error::Vocabulary(format!("concept #{concept_id}")))?;
    let m = MODALITIES.get(modality_id).ok_or_else(|| Error::Vocabulary(format!("modality #{modality_id}")))?;
    Ok(format!("segment the {c} in {m}"))
}

pub fn prompt_tokens(concept_id: usize, modality_id: usize) -> Result<Vec<usize>> {
    tokenize(&prompt_text(concept_id, modality_id)?)
}

/// Next-token targets for a sequence of `image_tokens` image positions
/// followed by `text`: position `k` predicts the token at `k + 1`, the last
/// text position predicts `<eos>`, and positions whose successor is an image
/// token are padding.
pub fn next_token_targets(image_tokens: usize, text: &[usize]) -> Vec<usize> {
    let total = image_tokens + text.len();
    (0..total)
        .map(|k| {
            if k + 1 < image_tokens {
                PAD
            } else if k + 1 < total {
                text[k + 1 - image_tokens]
            } else {
                EOS
            }
        })
        .collect()
}
