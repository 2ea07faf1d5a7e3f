//! Token/id lookup with fixed reserved ids.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::TextError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from the non-reserved token list; reserved ids 0..=3 are always
    /// present and fixed.
    pub fn new<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self, TextError> {
        let mut all: Vec<String> = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, token) in all.iter().enumerate() {
            if index.insert(token.clone(), i as u32).is_some() {
                return Err(TextError::DuplicateToken {
                    token: token.clone(),
                });
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Never true: the four reserved ids are always present.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// One non-reserved token per line; line number = id - 4.
    pub fn save(&self, path: &str) -> Result<(), TextError> {
        let mut out = String::new();
        for token in &self.tokens[4..] {
            let _ = writeln!(out, "{token}");
        }
        std::fs::write(path, out).map_err(|source| TextError::Io {
            path: path.to_string(),
            source,
        })
    }

    pub fn load(path: &str) -> Result<Self, TextError> {
        let body = super::read_to_string(path)?;
        Vocabulary::new(body.lines().map(str::to_string))
    }
}
