//! Decoding, metrics, codebook inspection and ablations.

pub mod ablation;
mod accuracy;
mod beam;
mod bleu;
pub mod inspect;

pub use accuracy::{group_by_image, recognition_accuracy};
pub use beam::{beam_search, greedy_decode, max_output_len, BeamHypothesis, BeamResult};
pub use bleu::{corpus_bleu, BleuScore, MAX_ORDER};

use serde::{Deserialize, Serialize};

use crate::codebook::CodebookState;
use crate::data::{Vocab, EOS};
use crate::error::Result;
use crate::model::{Inference, ModelParams, VisualMode};
use crate::pipeline::TrainExample;

/// How examples are fed to the model at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Read the recognized text instead of the ground truth when present.
    pub recognized: bool,
    /// Feed the image through the visual path.
    pub use_image: bool,
    pub mode: VisualMode,
}

impl DecodeOptions {
    /// Text-only decoding of the recognized text.
    pub fn text_only(beam: usize) -> Self {
        Self {
            beam,
            recognized: true,
            use_image: false,
            mode: VisualMode::Codebook,
        }
    }

    /// Recognized text plus image.
    pub fn with_image(beam: usize, mode: VisualMode) -> Self {
        Self {
            beam,
            recognized: true,
            use_image: true,
            mode,
        }
    }
}

fn source_of<'e>(ex: &'e TrainExample, opts: &DecodeOptions) -> &'e [usize] {
    match (&ex.recognized, opts.recognized) {
        (Some(r), true) => r,
        _ => &ex.source,
    }
}

/// Decode every example with beam search. Example `i` uses index `i` for
/// any random code draw.
pub fn translate_examples(
    mp: &ModelParams,
    cb: &CodebookState,
    examples: &[TrainExample],
    opts: &DecodeOptions,
) -> Result<Vec<BeamResult>> {
    let inf = Inference::new(mp, Some(cb), opts.mode);
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let src = source_of(ex, opts);
            let image = if opts.use_image { ex.image.as_ref() } else { None };
            let enc = inf.encode(src, image, i as u64)?;
            beam_search(&inf, &enc, opts.beam, max_output_len(src.len().saturating_sub(1)))
        })
        .collect()
}

/// Mean per-example negative log-likelihood of the references.
pub fn mean_nll(mp: &ModelParams, cb: &CodebookState, examples: &[TrainExample], opts: &DecodeOptions) -> Result<f64> {
    let inf = Inference::new(mp, Some(cb), opts.mode);
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let src = source_of(ex, opts);
        let image = if opts.use_image { ex.image.as_ref() } else { None };
        let enc = inf.encode(src, image, i as u64)?;
        let mut cache = inf.start();
        let mut prev = crate::data::BOS;
        for &next in ex.target.iter().chain(std::iter::once(&EOS)) {
            let lp = inf.step(&enc, &mut cache, prev)?;
            total -= lp[next];
            prev = next;
        }
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Scores of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    /// Recognition accuracy of the recognized text, when available.
    pub image_acc: Option<f64>,
    pub sent_acc: Option<f64>,
    pub n: usize,
    /// Mean per-example reference NLL.
    pub nll: Option<f64>,
}

/// Decode, score against the references and, when recognized text and image
/// ids exist, measure recognition accuracy.
pub fn evaluate(
    mp: &ModelParams,
    cb: &CodebookState,
    vocab: &Vocab,
    examples: &[TrainExample],
    image_ids: Option<&[String]>,
    opts: &DecodeOptions,
    with_nll: bool,
) -> Result<(MetricReport, Vec<String>)> {
    let outputs = translate_examples(mp, cb, examples, opts)?;
    let hyps: Vec<String> = outputs.iter().map(|o| vocab.detokenize(o.best.output())).collect();
    let refs: Vec<String> = examples.iter().map(|e| vocab.detokenize(&e.target)).collect();
    let bleu = corpus_bleu(&hyps, &refs)?;
    let (image_acc, sent_acc) = match image_ids {
        Some(ids) if examples.iter().all(|e| e.recognized.is_some()) => {
            let pred: Vec<String> = examples
                .iter()
                .map(|e| vocab.detokenize(e.recognized.as_deref().unwrap_or_default()))
                .collect();
            let gold: Vec<String> = examples.iter().map(|e| vocab.detokenize(&e.source)).collect();
            let (i, s) = recognition_accuracy(&pred, &gold, &group_by_image(ids))?;
            (Some(i), Some(s))
        }
        _ => (None, None),
    };
    let nll = if with_nll { Some(mean_nll(mp, cb, examples, opts)?) } else { None };
    Ok((
        MetricReport {
            bleu: bleu.bleu,
            precisions: bleu.precisions,
            bp: bleu.bp,
            image_acc,
            sent_acc,
            n: examples.len(),
            nll,
        },
        hyps,
    ))
}
