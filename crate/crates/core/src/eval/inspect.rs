//! Latent-code inspection: which tokens and images land on a code.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::CodebookState;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Inference, ModelParams, VisualMode};
use crate::pipeline::TrainExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeInspection {
    pub code: usize,
    /// EMA cluster size `n_k`.
    pub cluster_size: f64,
    /// Text positions assigned to the code.
    pub assignments: usize,
    /// Most frequent tokens with their counts, most frequent first.
    pub tokens: Vec<(String, usize)>,
    /// Seeded sample of images with a visual state on the code.
    pub image_ids: Vec<String>,
    /// False when no text position or image maps to the code.
    pub used: bool,
}

/// Nearest code of every source position, per example.
pub fn text_assignments(mp: &ModelParams, cb: &CodebookState, examples: &[TrainExample]) -> Result<Vec<Vec<usize>>> {
    let inf = Inference::new(mp, Some(cb), VisualMode::Codebook);
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let enc = inf.encode(&ex.source, None, i as u64)?;
            Ok(cb.quantize(&enc.text_states)?.indices)
        })
        .collect()
}

/// Assignment count of every code over all source positions.
pub fn code_histogram(assignments: &[Vec<usize>], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for a in assignments.iter().flatten() {
        h[*a] += 1;
    }
    h
}

/// Token counts per code from precomputed assignments.
pub fn token_counts(
    vocab: &Vocab,
    examples: &[TrainExample],
    assignments: &[Vec<usize>],
    code: usize,
) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for (ex, idx) in examples.iter().zip(assignments) {
        for (&tok, &c) in ex.source.iter().zip(idx) {
            if c == code {
                *counts.entry(vocab.token_name(tok)).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn top_tokens(counts: BTreeMap<String, usize>, top_n: usize) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(top_n);
    v
}

/// Quantize the dataset's text and images and report what maps to `code`.
/// Images are encoded with their recognized text when present.
#[allow(clippy::too_many_arguments)]
pub fn inspect_code(
    code: usize,
    mp: &ModelParams,
    cb: &CodebookState,
    vocab: &Vocab,
    examples: &[TrainExample],
    image_ids: &[String],
    top_n: usize,
    seed: u64,
) -> Result<CodeInspection> {
    if code >= cb.k() {
        return Err(Error::invalid("inspect_code", format!("code {code} >= codebook size {}", cb.k())));
    }
    if image_ids.len() != examples.len() {
        return Err(Error::invalid("inspect_code", "one image id per example required"));
    }
    let assignments = text_assignments(mp, cb, examples)?;
    let counts = token_counts(vocab, examples, &assignments, code);
    let total = counts.values().sum();
    let inf = Inference::new(mp, Some(cb), VisualMode::Codebook);
    let mut hits: Vec<&String> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let Some(image) = &ex.image else { continue };
        let src = ex.recognized.as_deref().unwrap_or(&ex.source);
        let enc = inf.encode(src, Some(image), i as u64)?;
        if enc.visual_codes.contains(&code) && !hits.contains(&&image_ids[i]) {
            hits.push(&image_ids[i]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, hits.len(), top_n.min(hits.len())).into_vec();
    picked.sort();
    let image_ids: Vec<String> = picked.into_iter().map(|i| hits[i].clone()).collect();
    Ok(CodeInspection {
        code,
        cluster_size: cb.counts()[code],
        assignments: total,
        used: total > 0 || !image_ids.is_empty(),
        tokens: top_tokens(counts, top_n),
        image_ids,
    })
}

/// `code_id,n_k,assignments,top_tokens` for every code, tokens joined by
/// spaces as `token:count`.
pub fn codebook_csv(
    cb: &CodebookState,
    vocab: &Vocab,
    examples: &[TrainExample],
    assignments: &[Vec<usize>],
    top_n: usize,
) -> String {
    let mut out = String::from("code_id,n_k,assignments,top_tokens\n");
    let hist = code_histogram(assignments, cb.k());
    for code in 0..cb.k() {
        let toks = top_tokens(token_counts(vocab, examples, assignments, code), top_n)
            .into_iter()
            .map(|(t, c)| format!("{}:{c}", t.replace(',', "<comma>")))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!("{code},{:.6},{},{toks}\n", cb.counts()[code], hist[code]));
    }
    out
}

/// Outcome of a label-permutation test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null_mean: f64,
    pub p_value: f64,
}

/// Fraction of positions whose code's majority label equals their label.
fn purity(codes: &[Vec<usize>], labels: &[usize], k: usize, n_labels: usize) -> f64 {
    let mut table = vec![0usize; k * n_labels];
    let mut n = 0;
    for (seq, &l) in codes.iter().zip(labels) {
        for &c in seq {
            table[c * n_labels + l] += 1;
            n += 1;
        }
    }
    let hits: usize = table.chunks(n_labels).map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    hits as f64 / n.max(1) as f64
}

/// Tests whether codes carry sentence-level labels (such as topics): the
/// statistic is code purity with respect to the labels, and the null
/// reassigns labels among sentences at random.
pub fn label_permutation_test(
    codes: &[Vec<usize>],
    labels: &[usize],
    k: usize,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    if codes.len() != labels.len() || codes.is_empty() {
        return Err(Error::invalid("permutation_test", "one label per sequence required"));
    }
    if codes.iter().flatten().any(|&c| c >= k) {
        return Err(Error::invalid("permutation_test", "code outside the codebook"));
    }
    let n_labels = labels.iter().max().map_or(1, |m| m + 1);
    let observed = purity(codes, labels, k, n_labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels.to_vec();
    let (mut ge, mut sum) = (0usize, 0.0);
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        let s = purity(codes, &shuffled, k, n_labels);
        sum += s;
        if s >= observed {
            ge += 1;
        }
    }
    Ok(PermutationTest {
        statistic: observed,
        null_mean: sum / permutations.max(1) as f64,
        p_value: (ge + 1) as f64 / (permutations + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_position() {
        let a = vec![vec![0, 1, 1], vec![2]];
        assert_eq!(code_histogram(&a, 4), vec![1, 2, 1, 0]);
    }

    #[test]
    fn labels_tied_to_codes_are_significant() {
        let codes: Vec<Vec<usize>> = (0..40).map(|i| vec![i % 4; 5]).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let t = label_permutation_test(&codes, &labels, 4, 200, 1).unwrap();
        assert_eq!(t.statistic, 1.0);
        assert!(t.p_value < 0.01);
    }

    #[test]
    fn unrelated_labels_are_not() {
        let codes: Vec<Vec<usize>> = (0..40).map(|_| vec![0, 1, 2]).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let t = label_permutation_test(&codes, &labels, 4, 200, 1).unwrap();
        assert!(t.p_value > 0.5);
    }
}
