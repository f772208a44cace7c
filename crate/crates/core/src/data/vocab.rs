//! Fixed toy vocabulary shared by every task.

use std::path::Path;

use crate::error::{Error, Result};

/// Reserved token that makes up the unconditional (empty) prompt.
pub const NULL: &str = "<null>";
/// Right-padding for prompts shorter than the text length.
pub const PAD: &str = "<pad>";

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "cyan", "magenta"];
pub const BACKGROUNDS: [&str; 3] = ["black", "gray", "white"];

const WORDS: [&str; 6] = ["a", "on", "make", "the", "remove", "and"];

/// Number of built-in tokens; model vocabularies must be at least this large.
pub const MIN_VOCAB: usize = 2 + WORDS.len() + SHAPES.len() + COLORS.len() + BACKGROUNDS.len();

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Vocab {
    pub fn builtin() -> Self {
        let tokens = [NULL, PAD]
            .into_iter()
            .chain(WORDS)
            .chain(SHAPES)
            .chain(COLORS)
            .chain(BACKGROUNDS)
            .map(String::from)
            .collect();
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::Data(format!("token `{token}` not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn null_id(&self) -> usize {
        self.id(NULL).expect("builtin token")
    }

    pub fn pad_id(&self) -> usize {
        self.id(PAD).expect("builtin token")
    }

    /// The unconditional prompt: every position is the null token.
    pub fn null_prompt(&self, len: usize) -> Vec<usize> {
        vec![self.null_id(); len]
    }

    /// Whitespace-separated words, right-padded to `len`.
    pub fn encode(&self, text: &str, len: usize) -> Result<Vec<usize>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Ok(self.null_prompt(len));
        }
        if words.len() > len {
            return Err(Error::Data(format!("prompt `{text}` has {} tokens, limit {len}", words.len())));
        }
        let mut ids = words.iter().map(|w| self.id(&w.to_ascii_lowercase())).collect::<Result<Vec<_>>>()?;
        ids.resize(len, self.pad_id());
        Ok(ids)
    }

    /// Inverse of [`Vocab::encode`]; padding and null tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| self.token(i))
            .filter(|t| *t != PAD && *t != NULL)
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Line-delimited tokens; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for reserved in [NULL, PAD] {
            if !tokens.iter().any(|t| t == reserved) {
                return Err(Error::Data(format!("{}: vocabulary lacks `{reserved}`", path.display())));
            }
        }
        Ok(Vocab { tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_pads_and_decodes() {
        let v = Vocab::builtin();
        assert_eq!(v.len(), MIN_VOCAB);
        let ids = v.encode("a red circle on gray", 8).unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[5..], [v.pad_id(); 3]);
        assert_eq!(v.decode(&ids), "a red circle on gray");
        assert_eq!(v.encode("", 4).unwrap(), v.null_prompt(4));
        assert!(v.encode("purple circle", 4).is_err());
        assert!(v.encode("a red circle on gray", 4).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::builtin();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
