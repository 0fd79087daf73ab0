use std::collections::HashMap;

use super::scene::{Background, Cell, Color, ObjectClass};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

/// Largest integer with its own token.
pub const MAX_NUMBER: usize = 32;

const WORDS: &[&str] = &[
    "a", "and", "are", "at", "belong", "caption", "contains", "does", "for", "image", "in", "is",
    "many", "more", "no", "objects", "of", "one", "part", "scene", "sentence", "short", "show",
    "than", "the", "there", "this", "to", "with", "yes", "Are", "Describe", "How", "Is", "What",
    "Where", "Which", "Write", "[refer]", "<p>", "</p>",
];

/// Closed word-level vocabulary over the instruction grammar, plus integer
/// and 0–99 coordinate tokens.
///
/// Canonical text separates tokens by single spaces, except that `?`, `.`
/// and `}` attach to the preceding token and coordinate tokens attach to a
/// preceding `{` or coordinate token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

fn is_coord(t: &str) -> bool {
    t.len() > 2 && t.starts_with('<') && t.ends_with('>') && t[1..t.len() - 1].bytes().all(|b| b.is_ascii_digit())
}

impl Tokenizer {
    pub fn standard() -> Self {
        let mut vocab: Vec<String> = ["<pad>", "<bos>", "<eos>", "<sep>", "?", ".", "{", "}"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        vocab.extend(WORDS.iter().map(|s| s.to_string()));
        for c in ObjectClass::ALL {
            vocab.push(c.name().into());
            vocab.push(c.plural().into());
        }
        vocab.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        vocab.extend(Background::ALL.iter().map(|b| b.name().to_string()));
        for cell in Cell::ALL {
            for w in cell.phrase().split(' ') {
                if !vocab.iter().any(|v| v == w) {
                    vocab.push(w.into());
                }
            }
        }
        vocab.extend((0..=MAX_NUMBER).map(|n| n.to_string()));
        vocab.extend((0..100).map(|n| format!("<{n}>")));
        Self::from_vocab(vocab).expect("standard vocabulary has no duplicates")
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Tokenize(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(|s| s.as_str())
    }

    /// Splits canonical text into token strings.
    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split(' ').filter(|w| !w.is_empty()) {
            let mut rest = word;
            while !rest.is_empty() {
                let first = rest.chars().next().expect("non-empty");
                let take = match first {
                    '{' | '}' | '?' | '.' => 1,
                    '<' => rest.find('>').map(|e| e + 1).unwrap_or(rest.len()),
                    _ => rest.find(['{', '}', '?', '.', '<']).unwrap_or(rest.len()),
                };
                out.push(rest[..take].to_string());
                rest = &rest[take..];
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        Self::split(text)
            .into_iter()
            .map(|t| self.id(&t).ok_or_else(|| Error::Tokenize(format!("unknown token `{t}` in `{text}`"))))
            .collect()
    }

    /// `BOS instruction SEP`, the prompt that generation continues.
    pub fn encode_prompt(&self, instruction: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(instruction)?);
        ids.push(SEP);
        Ok(ids)
    }

    /// `BOS instruction SEP target EOS` and the index of the first target
    /// token.
    pub fn encode_pair(&self, instruction: &str, target: &str) -> Result<(Vec<usize>, usize)> {
        let mut ids = self.encode_prompt(instruction)?;
        let start = ids.len();
        ids.extend(self.encode(target)?);
        ids.push(EOS);
        Ok((ids, start))
    }

    /// Canonical text for `ids`; special tokens are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev: Option<&str> = None;
        for &id in ids {
            if id <= SEP {
                continue;
            }
            let Some(t) = self.token(id) else { continue };
            let glue = matches!(t, "?" | "." | "}")
                || (is_coord(t) && prev.is_some_and(|p| p == "{" || is_coord(p)));
            if prev.is_some() && !glue {
                out.push(' ');
            }
            out.push_str(t);
            prev = Some(t);
        }
        out
    }
}
