//! Closed word-level vocabulary with special tokens.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const POINT: u32 = 4;
pub const SEG: u32 = 5;
pub const USER: u32 = 6;
pub const ASSISTANT: u32 = 7;

const SPECIALS: [&str; 8] = ["<pad>", "<s>", "</s>", "<unk>", "<POINT>", "<SEG>", "USER:", "ASSISTANT:"];
const PUNCTUATION: [char; 4] = [',', '.', '?', ':'];

fn is_punct(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCTUATION.contains(&c))
}

/// Split text into word pieces: whitespace-separated chunks with trailing
/// punctuation peeled off. Role markers and bracketed specials stay whole.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split(' ').filter(|c| !c.is_empty()) {
        if SPECIALS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = chunk;
        let mut trailing = Vec::new();
        while let Some(c) = word.chars().last() {
            if PUNCTUATION.contains(&c) && word.len() > 1 && !SPECIALS.contains(&word) {
                trailing.push(c.to_string());
                word = &word[..word.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.push(word.to_string());
        out.extend(trailing.into_iter().rev());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials first, then every distinct word of the corpus in sorted order.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in corpus {
            for w in split_words(text) {
                if !SPECIALS.contains(&w.as_str()) {
                    words.insert(w);
                }
            }
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("corpus tokens are unique")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate token {t:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if ids.get(*s) != Some(&(i as u32)) {
                return Err(invalid(format!("special token {s} must have id {i}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize) on well-formed text. Padding
    /// and sequence delimiters are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self.token(id).unwrap_or("<unk>");
            if !out.is_empty() && !is_punct(tok) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    /// `token<TAB>id` lines sorted by token.
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<(&str, usize)> = self.tokens.iter().map(String::as_str).zip(0..).collect();
        rows.sort();
        rows.iter().map(|(t, i)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| invalid(format!("vocabulary line {} lacks a tab", line_no + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| invalid(format!("bad id on vocabulary line {}", line_no + 1)))?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        for (expect, (id, _)) in pairs.iter().enumerate() {
            if *id != expect {
                return Err(invalid("vocabulary ids are not dense".to_string()));
            }
        }
        Self::from_tokens(pairs.into_iter().map(|(_, t)| t).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tsv(&text).map_err(|e| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
