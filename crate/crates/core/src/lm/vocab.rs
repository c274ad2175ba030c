use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Closed whitespace vocabulary. Ids are dense from zero, specials first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials followed by the given words in sorted order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut ws: Vec<String> = words.into_iter().map(|w| w.as_ref().to_string()).collect();
        ws.sort();
        ws.dedup();
        ws.retain(|w| !SPECIALS.contains(&w.as_str()));
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(ws).collect();
        Vocabulary::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                self.id(w).unwrap_or_else(|| {
                    log::warn!("unknown word `{w}` mapped to <unk>");
                    UNK
                })
            })
            .collect()
    }

    /// Joins word tokens with single spaces, stopping at EOS and skipping
    /// PAD/BOS.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(self.token(id));
                }
            }
        }
        out
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, sp) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*sp) {
                return Err(Error::parse(format!("vocabulary line {}", i + 1), format!("expected `{sp}`")));
            }
        }
        let v = Vocabulary::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::parse("vocabulary", "duplicate token"));
        }
        Ok(v)
    }
}
