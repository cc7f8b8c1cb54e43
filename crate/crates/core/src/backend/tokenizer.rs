//! Whitespace word-level tokenizer with support for injected tokens.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<|startoftext|>";

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: TokenId,
    bos: Option<TokenId>,
    /// Tokens added after construction; matched case-sensitively.
    added: Vec<TokenId>,
    /// Suffix marking whole-word entries (`</w>` in CLIP vocabularies).
    word_suffix: Option<String>,
}

impl Tokenizer {
    /// Builds a tokenizer over `words`. `<unk>` is required; `<|startoftext|>`
    /// is prepended to every encoding when present.
    pub fn new(words: Vec<String>) -> Result<Self> {
        Self::with_specials(words, UNK, Some(BOS), None)
    }

    /// Tokenizer over an id-ordered vocabulary with explicit special tokens.
    pub fn with_specials(words: Vec<String>, unk: &str, bos: Option<&str>, word_suffix: Option<&str>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate() {
            if index.insert(w.clone(), id).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        let unk = *index.get(unk).ok_or_else(|| Error::InvalidConfig(format!("vocabulary lacks {unk}")))?;
        let bos = bos.and_then(|b| index.get(b).copied());
        Ok(Self { vocab: words, index, unk, bos, added: Vec::new(), word_suffix: word_suffix.map(str::to_string) })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk
    }

    pub fn bos_id(&self) -> Option<TokenId> {
        self.bos
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.unk || Some(id) == self.bos
    }

    pub fn add_token(&mut self, token: &str) -> Result<TokenId> {
        if self.contains(token) {
            return Err(Error::PlaceholderCollision(token.to_string()));
        }
        let id = self.vocab.len();
        self.vocab.push(token.to_string());
        self.index.insert(token.to_string(), id);
        self.added.push(id);
        Ok(id)
    }

    fn lookup(&self, piece: &str) -> TokenId {
        if let Some(&id) = self.added.iter().find(|&&id| self.vocab[id] == piece) {
            return id;
        }
        let lowered = piece.to_lowercase();
        let key = match &self.word_suffix {
            Some(suffix) => format!("{lowered}{suffix}"),
            None => lowered,
        };
        self.index.get(&key).copied().unwrap_or(self.unk)
    }

    /// Word pieces without the start token.
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }

    /// Full encoding, start token first when the vocabulary has one.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.bos.into_iter().chain(self.encode_words(text)).collect()
    }

    /// Surface strings for an encoding, keeping the prompt's original spelling.
    pub fn surface(&self, text: &str) -> Vec<String> {
        self.bos
            .map(|b| self.vocab[b].clone())
            .into_iter()
            .chain(text.split_whitespace().map(str::to_string))
            .collect()
    }
}

/// Word list of the toy backend: two special tokens, then common prompt words.
pub const TOY_WORDS: &[&str] = &[
    UNK, BOS, "a", "an", "the", "photo", "of", "in", "on", "at", "with", "by", "inside", "among", "two",
    "table", "box", "basket", "cage", "jungle", "wall", "garden", "forest", "park", "water", "snow",
    "streets", "rocks", "leaves", "toy", "cat", "dog", "bear", "backpack", "vase", "clock", "sculpture",
    "red", "purple", "black", "blue", "green", "painting", "drawing", "watercolor", "pencil", "manga",
    "vector", "art", "style", "monet", "times", "square", "picnic", "blanket", "rainy", "grassy", "stone",
    "brick", "metal", "sunglasses", "bowtie", "floats", "snowy",
];

/// First `size` toy words, padded with `<extra_N>` entries when `size` exceeds the list.
pub fn toy_vocabulary(size: usize) -> Vec<String> {
    (0..size)
        .map(|i| TOY_WORDS.get(i).map(|w| w.to_string()).unwrap_or_else(|| format!("<extra_{i}>")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::new(toy_vocabulary(64)).unwrap()
    }

    #[test]
    fn toy_word_list_fills_default_vocabulary() {
        assert_eq!(TOY_WORDS.len(), 64);
    }

    #[test]
    fn encode_prepends_bos_and_maps_unknowns() {
        let tok = toy();
        let ids = tok.encode("a photo of a zebra");
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[0], tok.bos_id().unwrap());
        assert_eq!(ids[5], tok.unk_id());
        assert_eq!(ids[1], ids[4]);
    }

    #[test]
    fn added_tokens_are_case_sensitive() {
        let mut tok = toy();
        let id = tok.add_token("[V]").unwrap();
        assert_eq!(tok.encode_words("a [V] toy")[1], id);
        assert_eq!(tok.encode_words("a [v] toy")[1], tok.unk_id());
        assert!(matches!(tok.add_token("[V]"), Err(Error::PlaceholderCollision(_))));
    }

    #[test]
    fn deterministic() {
        let tok = toy();
        assert_eq!(tok.encode("a red toy on the table"), tok.encode("a red toy on the table"));
    }
}
