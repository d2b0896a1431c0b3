use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIAL: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased words, split on whitespace and punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Word vocabulary; the line number in the vocabulary file is the id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by every corpus word in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let tokens = SPECIAL.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("built vocabularies are well-formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL.len() || tokens[..SPECIAL.len()].iter().zip(SPECIAL).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with <pad>, <bos>, <eos>, <unk>".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Duplicate(format!("vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `<bos> words… <eos>` padded with `<pad>` to `len`, or truncated so
    /// that `<eos>` stays last.
    pub fn tokenize(&self, text: &str, len: usize) -> Vec<usize> {
        assert!(len >= 2, "context length must fit <bos> and <eos>");
        let mut ids = Vec::with_capacity(len);
        ids.push(BOS);
        ids.extend(split_words(text).iter().take(len - 2).map(|w| self.id(w)));
        ids.push(EOS);
        ids.resize(len, PAD);
        ids
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["Pavilion beside pond.", "a moon, a pine"])
    }

    #[test]
    fn empty_text() {
        let ids = vocab().tokenize("", 16);
        assert_eq!(&ids[..2], &[BOS, EOS]);
        assert!(ids[2..].iter().all(|&i| i == PAD));
        assert_eq!(ids.len(), 16);
    }

    #[test]
    fn words_map_through_vocabulary() {
        let v = vocab();
        let ids = v.tokenize("pavilion beside pond", 16);
        assert_eq!(&ids[..5], &[BOS, v.id("pavilion"), v.id("beside"), v.id("pond"), EOS]);
        assert!(ids[1..4].iter().all(|&i| i > UNK));
        assert_eq!(v.tokenize("PAVILION! zebra", 8)[1..3], [v.id("pavilion"), UNK]);
    }

    #[test]
    fn long_text_keeps_eos_last() {
        let text = vec!["pond"; 40].join(" ");
        let ids = vocab().tokenize(&text, 16);
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[15], EOS);
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let back = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(v.token(0), Some("<pad>"));
        assert!(Vocab::parse("a\nb\n").is_err());
    }
}
