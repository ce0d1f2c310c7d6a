use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::Hasher;

use super::Sentence;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const FILLER: &str = "<blank>";
pub const TAG: &str = "<T>";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const FILLER_ID: u32 = 4;
pub const TAG_ID: u32 = 5;

/// Reserved tokens, in id order.
pub const SPECIALS: [&str; 6] = [PAD, BOS, EOS, UNK, FILLER, TAG];

/// Token/id bijection. Specials always occupy ids `0..6` in [`SPECIALS`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens; duplicates and specials are skipped.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.insert(s.to_owned());
        }
        for t in tokens {
            vocab.insert(t.into());
        }
        vocab
    }

    fn insert(&mut self, token: String) {
        if self.index.contains_key(&token) {
            return;
        }
        self.index.insert(token.clone(), self.tokens.len() as u32);
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unknown id.
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Maps subword units to ids (no BOS/EOS added).
    pub fn encode(&self, units: &Sentence) -> Vec<u32> {
        units.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to units, dropping padding and sequence markers.
    pub fn decode(&self, ids: &[u32]) -> Sentence {
        Sentence::new(
            ids.iter()
                .filter(|&&id| !matches!(id, PAD_ID | BOS_ID | EOS_ID))
                .map(|&id| self.token(id).unwrap_or(UNK).to_owned())
                .collect(),
        )
    }

    /// Stable fingerprint of the token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Hasher::new();
        for t in &self.tokens {
            h.part(t.as_bytes());
        }
        h.finish()
    }

    /// Writes one token per line; ids are implicit line numbers.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_token_list(text.lines().map(str::to_owned).collect())
    }

    /// Rebuilds a vocabulary from a full id-ordered token list (specials included).
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary does not start with the reserved specials".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_low_ids() {
        let v = Vocabulary::new(["a", "b", "<T>", "a"]);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.get(s), Some(i as u32));
        }
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.get("a"), Some(6));
    }

    #[test]
    fn token_list_round_trip() {
        let v = Vocabulary::new(["x", "y"]);
        let back = Vocabulary::from_token_list(v.tokens().to_vec()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_token_list(vec!["x".into()]).is_err());
    }

    #[test]
    fn decode_drops_markers() {
        let v = Vocabulary::new(["x"]);
        assert_eq!(v.decode(&[BOS_ID, 6, EOS_ID, PAD_ID]).to_line(), "x");
    }
}
