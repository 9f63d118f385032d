//! Recognition accuracy at line and image level.

use crate::error::{Error, Result};

/// `(image_level, sentence_level)`: the fraction of images whose every
/// line matches exactly and the fraction of lines that match exactly.
/// `grouping[i]` lists the line indices of image `i`.
pub fn recognition_accuracy<P: AsRef<str>, G: AsRef<str>>(
    pred: &[P],
    gold: &[G],
    grouping: &[Vec<usize>],
) -> Result<(f64, f64)> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(
            "recognition_accuracy",
            format!("{} predicted lines for {} gold lines", pred.len(), gold.len()),
        ));
    }
    if gold.is_empty() || grouping.is_empty() {
        return Err(Error::invalid("recognition_accuracy", "no lines or no images"));
    }
    let correct: Vec<bool> = pred.iter().zip(gold).map(|(p, g)| p.as_ref() == g.as_ref()).collect();
    let mut images_ok = 0;
    for (i, lines) in grouping.iter().enumerate() {
        if let Some(&bad) = lines.iter().find(|&&l| l >= correct.len()) {
            return Err(Error::invalid(
                "recognition_accuracy",
                format!("image {i} refers to unknown line {bad}"),
            ));
        }
        if lines.iter().all(|&l| correct[l]) {
            images_ok += 1;
        }
    }
    let lines_ok = correct.iter().filter(|&&c| c).count();
    Ok((
        images_ok as f64 / grouping.len() as f64,
        lines_ok as f64 / correct.len() as f64,
    ))
}

/// Groups consecutive line indices by image id, in first-seen order.
pub fn group_by_image<S: AsRef<str>>(image_ids: &[S]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut names: Vec<&str> = Vec::new();
    for (i, id) in image_ids.iter().enumerate() {
        match names.iter().position(|n| *n == id.as_ref()) {
            Some(g) => groups[g].push(i),
            None => {
                names.push(id.as_ref());
                groups.push(vec![i]);
            }
        }
    }
    groups
}
