//! Word-level vocabulary over the joint text + image token space.
//!
//! Text ids occupy `[0, text_len)`, image ids `[text_len, text_len + image_len)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// End-of-answer sentinel.
pub const EOA: TokenId = 0;
pub const Q_MARK: TokenId = 1;
pub const A_MARK: TokenId = 2;
pub const SEP: TokenId = 3;
pub const OPEN: TokenId = 4;
pub const CLOSE: TokenId = 5;

pub const SPECIALS: [&str; 6] = ["<eoa>", "q:", "a:", ";", "[", "]"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    image_len: usize,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(image_len: usize) -> Self {
        let mut v = Self {
            words: Vec::new(),
            image_len,
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.intern(s);
        }
        v
    }

    /// Returns the id of `word`, adding it if new.
    pub fn intern(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn text_len(&self) -> usize {
        self.words.len()
    }

    pub fn image_len(&self) -> usize {
        self.image_len
    }

    pub fn total_len(&self) -> usize {
        self.words.len() + self.image_len
    }

    pub fn is_image(&self, id: TokenId) -> bool {
        id >= self.words.len() && id < self.total_len()
    }

    pub fn image_token(&self, k: usize) -> TokenId {
        self.words.len() + k % self.image_len
    }

    /// Tokenizes whitespace-separated text; `?` and `.` split off as tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let spaced = text.replace('?', " ? ").replace('.', " . ");
        spaced
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.id(&w)
                    .ok_or_else(|| Error::Index(format!("unknown word {w:?}")))
            })
            .collect()
    }

    pub fn word(&self, id: TokenId) -> String {
        if id < self.words.len() {
            self.words[id].clone()
        } else {
            format!("<img{}>", id - self.words.len())
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }
}
