//! Character-level vocabulary with four reserved ids.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Vocabulary over the distinct characters of `chars`, sorted.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v: Vec<char> = chars.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        let index = v.iter().enumerate().map(|(i, &c)| (c, i + RESERVED.len())).collect();
        Self { chars: v, index }
    }

    /// Space, `a`-`z` and `A`-`Z`.
    pub fn latin() -> Self {
        Self::from_chars(std::iter::once(' ').chain('a'..='z').chain('A'..='Z'))
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    /// Character of a non-reserved id.
    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED.len()).and_then(|i| self.chars.get(i)).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Tokens followed by EOS, the form fed to the text encoder.
    pub fn encode_source(&self, text: &str) -> Vec<usize> {
        let mut t = self.tokenize(text);
        t.push(EOS);
        t
    }

    /// Inverse of [`tokenize`](Self::tokenize). Stops at EOS; skips PAD and
    /// BOS; UNK becomes U+FFFD.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut s = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                UNK => s.push('\u{FFFD}'),
                _ => s.push(self.char_of(id).unwrap_or('\u{FFFD}')),
            }
        }
        s
    }

    /// Display form of any id, reserved ones included.
    pub fn token_name(&self, id: usize) -> String {
        match RESERVED.get(id) {
            Some(r) => (*r).to_string(),
            None => self.char_of(id).map_or_else(|| format!("<{id}>"), String::from),
        }
    }

    /// One non-reserved token per line; line `i` has id `4 + i`.
    pub fn to_file_string(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let mut chars = Vec::new();
        let body = s.strip_suffix('\n').unwrap_or(s);
        let lines = if body.is_empty() { Vec::new() } else { body.split('\n').collect() };
        for (i, line) in lines.into_iter().enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("expected one character, found {line:?}"),
                    })
                }
            }
        }
        let v = Self::from_chars(chars.iter().copied());
        if v.chars != chars {
            return Err(Error::Parse {
                line: 0,
                msg: "vocabulary file must list distinct characters in sorted order".into(),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&s)
    }
}
