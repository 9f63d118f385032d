//! Stage objectives built on the tape.

use std::rc::Rc;

use crate::codebook::alignment_on_tape;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{
    alignment_loss, decode_logits, encode_backbone, encode_text, fuse_visual, memory_with_visual, text_commitment,
    translation_loss, Batch, ImageBatch, ModelParams, Quantizer, VisualMode,
};
use crate::pipeline::batching::TrainExample;
use crate::pipeline::config::EmaSource;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2D;

/// A weighted sum of named loss terms.
pub struct LossTerms {
    pub total: Var,
    /// `(name, weight, term)`.
    pub parts: Vec<(&'static str, f64, Var)>,
    /// States and assignments for the codebook update.
    pub ema: Option<(Tensor2D, Vec<usize>)>,
}

impl LossTerms {
    fn new(tape: &mut Tape<'_>, parts: Vec<(&'static str, f64, Var)>, ema: Option<(Tensor2D, Vec<usize>)>) -> Result<Self> {
        let terms: Vec<(Var, f64)> = parts.iter().map(|&(_, w, v)| (v, w)).collect();
        let total = tape.combine(&terms)?;
        Ok(Self { total, parts, ema })
    }

    /// `(name, weight, value)` of every term.
    pub fn values(&self, tape: &Tape<'_>) -> Vec<(&'static str, f64, f64)> {
        self.parts.iter().map(|&(n, w, v)| (n, w, tape.value(v).item())).collect()
    }
}

/// Stage-specific weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub label_smoothing: f64,
    pub include_l3: bool,
    pub ema_source: EmaSource,
}

fn sources(examples: &[&TrainExample]) -> Result<Batch> {
    Batch::new(&examples.iter().map(|e| e.source.as_slice()).collect::<Vec<_>>())
}

fn recognized(examples: &[&TrainExample]) -> Result<Batch> {
    let seqs = examples
        .iter()
        .map(|e| {
            e.recognized
                .as_deref()
                .ok_or_else(|| Error::invalid("stage 4", "example without recognized text"))
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::new(&seqs)
}

fn images(mp: &ModelParams, examples: &[&TrainExample]) -> Result<ImageBatch> {
    let imgs = examples
        .iter()
        .map(|e| e.image.as_ref().ok_or_else(|| Error::invalid("visual stage", "example without image")))
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::new(mp, &imgs)
}

fn segment_means(h: &Tensor2D, segments: &[(usize, usize)]) -> Tensor2D {
    let mut out = Tensor2D::zeros(segments.len(), h.cols());
    for (i, &(s, l)) in segments.iter().enumerate() {
        let row = out.row_mut(i);
        for r in s..s + l {
            for (o, v) in row.iter_mut().zip(h.row(r)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o /= l as f64);
    }
    out
}

/// `L1`: label-smoothed translation loss from ground-truth text.
pub fn stage1_loss<'a>(
    tape: &mut Tape<'a>,
    mp: &'a ModelParams,
    examples: &[&TrainExample],
    label_smoothing: f64,
) -> Result<LossTerms> {
    let src = sources(examples)?;
    let targets: Vec<&[usize]> = examples.iter().map(|e| e.target.as_slice()).collect();
    let nll = translation_loss(tape, mp, &src, &targets, label_smoothing, BOS, EOS)?;
    LossTerms::new(tape, vec![("nll", 1.0, nll)], None)
}

/// Image-side alignment terms with fusion queries `queries` and text
/// states `text` (both already on the tape). Quantizes `text` first when
/// `text_codes` is absent.
fn alignment_terms<'a>(
    tape: &mut Tape<'a>,
    mp: &'a ModelParams,
    quantizer: &mut Quantizer<'_>,
    queries: Var,
    text_value: &Tensor2D,
    text_codes: &Tensor2D,
    segments: &[(usize, usize)],
    features: Var,
    per_image: usize,
    alpha: f64,
) -> Result<Vec<(&'static str, f64, Var)>> {
    let hv = fuse_visual(tape, mp, queries, segments, features, per_image)?;
    if quantizer.mode() == VisualMode::Continuous {
        let target = segment_means(text_value, segments);
        let ita = alignment_on_tape(tape, hv, Rc::new(segments.to_vec()), target)?;
        return Ok(vec![("ita", 1.0, ita)]);
    }
    let q = quantizer.quantize(tape, hv, true)?;
    let ita = alignment_loss(tape, q.var, text_codes, segments)?;
    let ic = text_commitment(tape, hv, &q.codes, segments)?;
    Ok(vec![("ita", 1.0, ita), ("ic", alpha, ic)])
}

/// `L3 = L_ita + α·L_ic` with frozen text states of the ground truth as
/// fusion queries and alignment targets. The codebook update clusters the
/// same text states.
pub fn stage3_loss<'a>(
    tape: &mut Tape<'a>,
    mp: &'a ModelParams,
    quantizer: &mut Quantizer<'_>,
    examples: &[&TrainExample],
    alpha: f64,
) -> Result<LossTerms> {
    let src = sources(examples)?;
    let he_value = {
        let mut frozen = Tape::inference();
        let h = encode_text(&mut frozen, mp, &src)?;
        frozen.value(h).clone()
    };
    let he = tape.constant(he_value.clone())?;
    let imgs = images(mp, examples)?;
    let features = encode_backbone(tape, mp, &imgs)?;
    let text_q = quantizer.quantize(tape, he, false)?;
    let parts = alignment_terms(
        tape,
        mp,
        quantizer,
        he,
        &he_value,
        &text_q.codes,
        &src.segments,
        features,
        imgs.per_image,
        alpha,
    )?;
    let ema = (quantizer.mode() != VisualMode::Continuous).then(|| (he_value, text_q.indices));
    LossTerms::new(tape, parts, ema)
}

/// `L4 = L_ita + α·L_ic + L_tit + β·L_tc`. Alignment and text commitment
/// read the ground truth; translation reads the recognized text and the
/// image. Without the codebook the commitment terms vanish.
pub fn stage4_loss<'a>(
    tape: &mut Tape<'a>,
    mp: &'a ModelParams,
    quantizer: &mut Quantizer<'_>,
    examples: &[&TrainExample],
    w: &LossWeights,
) -> Result<LossTerms> {
    let src = sources(examples)?;
    let rec = recognized(examples)?;
    let imgs = images(mp, examples)?;
    let targets: Vec<&[usize]> = examples.iter().map(|e| e.target.as_slice()).collect();
    let continuous = quantizer.mode() == VisualMode::Continuous;
    let features = encode_backbone(tape, mp, &imgs)?;

    let he = encode_text(tape, mp, &src)?;
    let he_value = tape.value(he).clone();
    let text_q = quantizer.quantize(tape, he, false)?;
    let mut parts = Vec::new();
    if w.include_l3 {
        let queries = tape.constant(he_value.clone())?;
        parts.extend(alignment_terms(
            tape,
            mp,
            quantizer,
            queries,
            &he_value,
            &text_q.codes,
            &src.segments,
            features,
            imgs.per_image,
            w.alpha,
        )?);
    }

    let hr = encode_text(tape, mp, &rec)?;
    let hv = fuse_visual(tape, mp, hr, &rec.segments, features, imgs.per_image)?;
    let zq = quantizer.visual_codes(tape, hv, mp.config().straight_through)?;
    let memory = memory_with_visual(tape, hr, &rec.segments, Some(zq.var))?;
    let (inputs, gold) = Batch::decoder_io(&targets, BOS, EOS)?;
    let logits = decode_logits(tape, mp, &memory, &inputs)?;
    let tit = tape.label_smoothed_ce(logits, &gold, w.label_smoothing)?;
    parts.push(("tit", 1.0, tit));

    if continuous {
        return LossTerms::new(tape, parts, None);
    }
    let tc = text_commitment(tape, he, &text_q.codes, &src.segments)?;
    parts.push(("tc", w.beta, tc));
    let cb = quantizer.codebook();
    let ema = match w.ema_source {
        EmaSource::Truth => (he_value, text_q.indices),
        EmaSource::Recognized => {
            let hr_value = tape.value(hr).clone();
            let idx = cb.quantize(&hr_value)?.indices;
            (hr_value, idx)
        }
        EmaSource::Both => {
            let hr_value = tape.value(hr).clone();
            let mut idx = text_q.indices;
            idx.extend(cb.quantize(&hr_value)?.indices);
            (Tensor2D::vstack(&[&he_value, &hr_value])?, idx)
        }
    };
    LossTerms::new(tape, parts, Some(ema))
}
