//! A synthetic language pair with an exactly invertible translation rule.
//!
//! Source words are lowercase letter strings grouped into topics; every
//! source word has its own uppercase target word. A sentence translates
//! word by word with the word order reversed.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub topics: usize,
    pub words_per_topic: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Seed of the lexicon itself.
    pub seed: u64,
}

impl Default for LanguageSpec {
    fn default() -> Self {
        Self {
            topics: 8,
            words_per_topic: 12,
            min_word_len: 3,
            max_word_len: 6,
            min_words: 2,
            max_words: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Language {
    spec: LanguageSpec,
    source: Vec<String>,
    target: Vec<String>,
    source_index: HashMap<String, usize>,
    target_index: HashMap<String, usize>,
}

fn random_word(rng: &mut ChaCha8Rng, min: usize, max: usize, upper: bool) -> String {
    let len = rng.random_range(min..=max);
    let base = if upper { b'A' } else { b'a' };
    (0..len).map(|_| (base + rng.random_range(0..26u8)) as char).collect()
}

fn unique_words(rng: &mut ChaCha8Rng, n: usize, min: usize, max: usize, upper: bool) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = random_word(rng, min, max, upper);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Language {
    pub fn new(spec: LanguageSpec) -> Result<Self> {
        if spec.topics == 0 || spec.words_per_topic == 0 {
            return Err(Error::invalid("language", "need at least one topic and word"));
        }
        if spec.min_word_len == 0 || spec.min_word_len > spec.max_word_len {
            return Err(Error::invalid("language", "word lengths must satisfy 1 ≤ min ≤ max"));
        }
        if spec.min_words == 0 || spec.min_words > spec.max_words {
            return Err(Error::invalid("language", "sentence lengths must satisfy 1 ≤ min ≤ max"));
        }
        let n = spec.topics * spec.words_per_topic;
        let possible: f64 = (spec.min_word_len..=spec.max_word_len).map(|l| 26f64.powi(l as i32)).sum();
        if (n as f64) > possible / 2.0 {
            return Err(Error::invalid("language", "lexicon too large for the word lengths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let source = unique_words(&mut rng, n, spec.min_word_len, spec.max_word_len, false);
        let target = unique_words(&mut rng, n, spec.min_word_len, spec.max_word_len, true);
        let source_index = source.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let target_index = target.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self {
            spec,
            source,
            target,
            source_index,
            target_index,
        })
    }

    /// The same lexicon with a different sentence-length range.
    pub fn with_sentence_lengths(&self, min_words: usize, max_words: usize) -> Result<Self> {
        if min_words == 0 || min_words > max_words {
            return Err(Error::invalid("language", "sentence lengths must satisfy 1 ≤ min ≤ max"));
        }
        let mut out = self.clone();
        out.spec.min_words = min_words;
        out.spec.max_words = max_words;
        Ok(out)
    }

    pub fn spec(&self) -> &LanguageSpec {
        &self.spec
    }

    pub fn source_words(&self) -> &[String] {
        &self.source
    }

    pub fn target_words(&self) -> &[String] {
        &self.target
    }

    /// Topic of source word `i`.
    pub fn topic_of(&self, word: usize) -> usize {
        word / self.spec.words_per_topic
    }

    pub fn source_word_index(&self, w: &str) -> Option<usize> {
        self.source_index.get(w).copied()
    }

    /// Longest possible sentence in characters.
    pub fn max_chars(&self) -> usize {
        self.spec.max_words * (self.spec.max_word_len + 1) - 1
    }

    /// Closed-form translation; `None` if a word is outside the lexicon.
    pub fn translate(&self, source: &str) -> Option<String> {
        let words: Option<Vec<&str>> = source
            .split(' ')
            .map(|w| self.source_index.get(w).map(|&i| self.target[i].as_str()))
            .collect();
        let mut words = words?;
        words.reverse();
        Some(words.join(" "))
    }

    /// Inverse of [`translate`](Self::translate).
    pub fn invert(&self, target: &str) -> Option<String> {
        let words: Option<Vec<&str>> = target
            .split(' ')
            .map(|w| self.target_index.get(w).map(|&i| self.source[i].as_str()))
            .collect();
        let mut words = words?;
        words.reverse();
        Some(words.join(" "))
    }

    /// One sentence: a topic, then words drawn from it with replacement.
    pub fn sentence(&self, rng: &mut impl Rng) -> String {
        let topic = rng.random_range(0..self.spec.topics);
        let len = rng.random_range(self.spec.min_words..=self.spec.max_words);
        let words = &self.source[topic * self.spec.words_per_topic..(topic + 1) * self.spec.words_per_topic];
        (0..len)
            .map(|_| words.choose(rng).expect("nonempty topic").as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `size` (source, target) pairs, a pure function of the language and seed.
pub fn gen_parallel_corpus(lang: &Language, size: usize, seed: u64) -> Result<Vec<(String, String)>> {
    if size == 0 {
        return Err(Error::invalid("gen_parallel_corpus", "size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..size)
        .map(|_| {
            let s = lang.sentence(&mut rng);
            let t = lang.translate(&s).expect("lexicon sentence");
            (s, t)
        })
        .collect())
}

pub fn write_tsv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (s, t) in pairs {
        writeln!(f, "{s}\t{t}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text)
}

pub fn parse_tsv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (s, t) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected `source<TAB>target`".into(),
        })?;
        if t.contains('\t') {
            return Err(Error::Parse {
                line: i + 1,
                msg: "more than two columns".into(),
            });
        }
        out.push((s.to_string(), t.to_string()));
    }
    Ok(out)
}
