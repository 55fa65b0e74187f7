use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::Corpus;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ index map with `PAD = 0` and `UNK = 1` reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary holding the reserved entries plus `tokens`, in order.
    /// Duplicates and reserved names are skipped.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocab {
            tokens: Vec::with_capacity(tokens.len() + 2),
            index: HashMap::with_capacity(tokens.len() + 2),
        };
        v.push(PAD_TOKEN);
        v.push(UNK_TOKEN);
        for t in &tokens {
            v.push(t);
        }
        v
    }

    fn push(&mut self, t: &str) {
        if !self.index.contains_key(t) {
            self.index.insert(t.to_string(), self.tokens.len());
            self.tokens.push(t.to_string());
        }
    }

    /// Tokens of `corpus` seen at least `min_count` times, in order of first
    /// appearance.
    pub fn build(corpus: &Corpus, min_count: usize) -> Self {
        let (order, counts) = count_tokens(corpus.conversations.iter().flat_map(|c| &c.utterances).flat_map(|u| &u.tokens));
        Self::from_tokens(order.into_iter().filter(|t| counts[t] >= min_count.max(1)).collect())
    }

    /// POS tag vocabulary (every tag seen at least once).
    pub fn build_pos(corpus: &Corpus) -> Self {
        let (order, _) = count_tokens(
            corpus
                .conversations
                .iter()
                .flat_map(|c| &c.utterances)
                .filter_map(|u| u.pos.as_ref())
                .flatten(),
        );
        Self::from_tokens(order)
    }

    /// Index of `token`, falling back to [`UNK`].
    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Hex SHA-256 of the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn count_tokens<'a>(tokens: impl Iterator<Item = &'a String>) -> (Vec<String>, HashMap<String, usize>) {
    let mut order = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in tokens {
        if t == PAD_TOKEN || t == UNK_TOKEN {
            continue;
        }
        let n = counts.entry(t.clone()).or_insert(0);
        if *n == 0 {
            order.push(t.clone());
        }
        *n += 1;
    }
    (order, counts)
}
