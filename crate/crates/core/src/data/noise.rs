//! Seeded OCR error channel: per-character substitution among visually
//! similar glyphs, deletion, and insertion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::render::glyph_distance;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub substitution: f64,
    pub deletion: f64,
    pub insertion: f64,
    /// Substitutes are drawn from this many nearest glyphs.
    pub neighborhood: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean(seed: u64) -> Self {
        Self {
            substitution: 0.0,
            deletion: 0.0,
            insertion: 0.0,
            neighborhood: 1,
            seed,
        }
    }

    /// Total event rate split 2/3 substitution, 1/6 deletion, 1/6 insertion.
    pub fn with_rate(rate: f64, seed: u64) -> Self {
        Self {
            substitution: rate * 2.0 / 3.0,
            deletion: rate / 6.0,
            insertion: rate / 6.0,
            neighborhood: 3,
            seed,
        }
    }

    pub fn total_rate(&self) -> f64 {
        self.substitution + self.deletion + self.insertion
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.substitution, self.deletion, self.insertion];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || self.total_rate() > 1.0 + 1e-12 {
            return Err(Error::invalid("noise", "rates must lie in [0, 1] and sum to at most 1"));
        }
        if self.neighborhood == 0 || self.neighborhood > 25 {
            return Err(Error::invalid("noise", "neighborhood must be in 1..=25"));
        }
        Ok(())
    }
}

/// The `n` lowercase letters whose glyphs are closest to `c`, nearest
/// first, ties in alphabetical order.
pub fn confusion_neighbors(c: char, n: usize) -> Vec<char> {
    let lower = c.to_ascii_lowercase();
    let mut others: Vec<(usize, char)> = ('a'..='z')
        .filter(|&o| o != lower)
        .map(|o| (glyph_distance(lower, o), o))
        .collect();
    others.sort();
    others.into_iter().take(n).map(|(_, o)| o).collect()
}

/// Corrupt the letters of `text`; other characters pass through. The
/// outcome is a pure function of `(text, spec, example)`.
pub fn corrupt_ocr(text: &str, spec: &NoiseSpec, example: u64) -> Result<String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(example);
    let mut out = String::with_capacity(text.len() + 4);
    for c in text.chars() {
        if !c.is_ascii_alphabetic() {
            out.push(c);
            continue;
        }
        let u: f64 = rng.random();
        if u < spec.substitution {
            let nbrs = confusion_neighbors(c, spec.neighborhood);
            let pick = nbrs[rng.random_range(0..nbrs.len())];
            out.push(if c.is_ascii_uppercase() { pick.to_ascii_uppercase() } else { pick });
        } else if u < spec.substitution + spec.deletion {
        } else if u < spec.total_rate() {
            out.push(c);
            out.push(rng.random_range(b'a'..=b'z') as char);
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rates_are_identity() {
        let s = "the quick brown fox";
        assert_eq!(corrupt_ocr(s, &NoiseSpec::clean(9), 4).unwrap(), s);
    }

    #[test]
    fn full_substitution_neighborhood_one() {
        let spec = NoiseSpec {
            substitution: 1.0,
            ..NoiseSpec::clean(1)
        };
        let out = corrupt_ocr("abc xyz", &spec, 0).unwrap();
        let expect: String = "abc xyz"
            .chars()
            .map(|c| if c == ' ' { c } else { confusion_neighbors(c, 1)[0] })
            .collect();
        assert_eq!(out, expect);
        assert!(out.chars().zip("abc xyz".chars()).all(|(a, b)| b == ' ' || a != b));
    }

    #[test]
    fn reproducible_per_example() {
        let spec = NoiseSpec::with_rate(0.3, 5);
        let a = corrupt_ocr("some longer sentence here", &spec, 17).unwrap();
        assert_eq!(a, corrupt_ocr("some longer sentence here", &spec, 17).unwrap());
    }

    #[test]
    fn invalid_rates_rejected() {
        let spec = NoiseSpec {
            substitution: 0.7,
            deletion: 0.5,
            ..NoiseSpec::clean(0)
        };
        assert!(corrupt_ocr("a", &spec, 0).is_err());
    }
}
