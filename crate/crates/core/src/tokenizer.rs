//! Whitespace word-level tokenizer with reserved control tokens, and the
//! last-control-token-wins routing rule.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CTRL_THINK: usize = 3;
pub const CTRL_NOTHINK: usize = 4;
pub const UNK: usize = 5;

/// Reserved tokens in id order. The first five are the specials every
/// vocabulary file starts with; `<unk>` follows them.
pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "/think", "/no_think", "<unk>"];

/// Which expert pathway a response uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    #[default]
    NoThink = 0,
    Think = 1,
}

impl Route {
    pub const BOTH: [Route; 2] = [Route::NoThink, Route::Think];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(value: usize) -> Result<Self> {
        match value {
            0 => Ok(Route::NoThink),
            1 => Ok(Route::Think),
            other => Err(Error::Argument(format!("route must be 0 or 1, got {other}"))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Route::NoThink => Route::Think,
            Route::Think => Route::NoThink,
        }
    }

    pub fn control_token(self) -> usize {
        match self {
            Route::NoThink => CTRL_NOTHINK,
            Route::Think => CTRL_THINK,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Route::NoThink => "no_think",
            Route::Think => "think",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "no_think" | "0" => Ok(Route::NoThink),
            "think" | "1" => Ok(Route::Think),
            other => Err(Error::Argument(format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

pub fn is_control(id: usize) -> bool {
    id == CTRL_THINK || id == CTRL_NOTHINK
}

/// Route chosen by the final control token; `default` when none is present.
pub fn resolve_route(ids: &[usize], default: Route) -> Route {
    match ids.iter().rev().find(|&&id| is_control(id)) {
        Some(&CTRL_THINK) => Route::Think,
        Some(_) => Route::NoThink,
        None => default,
    }
}

/// Closed, bijective token ↔ id map.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` (duplicates and reserved strings
    /// are skipped).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            vocab.insert(t);
        }
        for w in words {
            vocab.insert(w.as_ref());
        }
        vocab
    }

    /// Vocabulary covering every whitespace token of `texts`, in first-seen order.
    pub fn from_corpus<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::new(texts.into_iter().flat_map(str::split_whitespace))
    }

    fn insert(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Number of whitespace tokens in `text` that fall back to `<unk>`.
    pub fn unknown_count(&self, text: &str) -> usize {
        text.split_whitespace().filter(|t| self.id(t).is_none()).count()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            parts.push(self.token(id).ok_or(Error::Index {
                what: "token id",
                index: id,
                bound: self.len(),
            })?);
        }
        Ok(parts.join(" "))
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, expected) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(expected) {
                return Err(Error::Format(format!(
                    "vocabulary line {} must be `{expected}`",
                    i + 1
                )));
            }
        }
        let mut vocab = Self::new(std::iter::empty::<&str>());
        for (i, line) in lines.iter().enumerate().skip(RESERVED.len()) {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Format(format!("vocabulary line {} is not a single token", i + 1)));
            }
            if vocab.id(line).is_some() {
                return Err(Error::Format(format!("vocabulary line {} duplicates `{line}`", i + 1)));
            }
            vocab.insert(line);
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
