//! Finite-difference checks of every composite forward and stage loss on
//! the two-layer, width-32 configuration, shared by the gradient tests and
//! the acceptance run.

#![allow(dead_code)]

use tit_core::codebook::CodebookState;
use tit_core::data::{GrayImage, BOS, EOS};
use tit_core::gradcheck::{grad_check_with, GradCheckOptions, GradCheckReport};
use tit_core::model::{
    alignment_loss, decode_logits, encode_backbone, encode_text, fuse_visual, memory_with_visual, text_commitment, tit_loss, translation_loss, Batch,
    ImageBatch, ModelConfig, ModelParams, QuantizeRecord, Quantizer, VisualMode,
};
use tit_core::params::{Partition, PartitionSet};
use tit_core::pipeline::losses::{stage1_loss, stage3_loss, stage4_loss, LossWeights};
use tit_core::pipeline::{EmaSource, TrainExample};
use tit_core::tape::{Tape, TapeConfig, Var};
use tit_core::tensor::Tensor2D;
use tit_core::Result;

pub const VOCAB: usize = 14;
pub const TOL: f64 = 1e-4;

pub fn model() -> ModelParams {
    ModelParams::new(ModelConfig::tiny(VOCAB), 11).unwrap()
}

pub fn codebook() -> CodebookState {
    CodebookState::random(16, 32, 0.99, 5).unwrap()
}

pub fn image(seed: usize) -> GrayImage {
    let pixels = (0..8 * 16).map(|i| ((i * 53 + seed * 101) % 256) as u8).collect();
    GrayImage::new(16, 8, pixels).unwrap()
}

pub fn examples() -> Vec<TrainExample> {
    vec![
        TrainExample {
            source: vec![4, 5, 6, 7, EOS],
            recognized: Some(vec![4, 9, 6, EOS]),
            image: Some(image(0)),
            target: vec![8, 9, 10],
        },
        TrainExample {
            source: vec![11, 12, EOS],
            recognized: Some(vec![11, 12, 13, EOS]),
            image: Some(image(1)),
            target: vec![5, 4],
        },
    ]
}

/// Gradients that vanish identically, such as attention key biases, leave
/// only rounding noise of about 1e-9 in the central difference.
pub fn opts() -> GradCheckOptions {
    GradCheckOptions {
        max_entries: 6,
        floor: 1e-4,
        ..GradCheckOptions::default()
    }
}

fn tape<'a>(trainable: PartitionSet) -> Tape<'a> {
    Tape::new(TapeConfig::train(trainable, 0.0, 0, 0))
}

/// Reduce a block of states to a scalar through a fixed random target.
fn probe(tape: &mut Tape<'_>, h: Var, salt: usize) -> Result<Var> {
    let (r, c) = tape.value(h).shape();
    let target = Tensor2D::from_vec(r, c, (0..r * c).map(|i| (((i + salt) * 7919) % 17) as f64 / 17.0 - 0.5).collect())?;
    let weights = (0..r).map(|i| 1.0 + 0.1 * i as f64).collect();
    tape.weighted_row_sq_dist(h, target, weights)
}

pub fn check<F>(mp: ModelParams, f: F) -> GradCheckReport
where
    F: for<'a> FnMut(&mut Tape<'a>, &'a ModelParams) -> Result<Var>,
{
    check_only(mp, PartitionSet::all(), f)
}

/// Checks the partitions in `trainable`. Parameters behind a stop-gradient
/// input must stay out: perturbing them moves the constant.
pub fn check_only<F>(mut mp: ModelParams, trainable: PartitionSet, mut f: F) -> GradCheckReport
where
    F: for<'a> FnMut(&mut Tape<'a>, &'a ModelParams) -> Result<Var>,
{
    grad_check_with(&mut mp, ModelParams::store_mut, &opts(), |mp, want| {
        let mut tape = tape(trainable);
        let loss = f(&mut tape, mp)?;
        let value = tape.value(loss).item();
        Ok((value, want.then(|| tape.backward(loss, mp.store())).transpose()?))
    })
    .unwrap()
}

/// Whether `report` covers at least `min_params` tensors within tolerance.
pub fn passes(report: &GradCheckReport, min_params: usize) -> bool {
    report.params.len() >= min_params && report.worst().is_some_and(|w| w.max_rel_err < TOL)
}

pub fn assert_passes(report: &GradCheckReport, min_params: usize) {
    assert!(report.params.len() >= min_params, "{} params checked", report.params.len());
    let worst = report.worst().unwrap();
    assert!(worst.max_rel_err < TOL, "{} rel err {}", worst.name, worst.max_rel_err);
}

/// Records the quantizer choices of one forward so every later evaluation
/// replays them.
fn recorded<F>(mp: &ModelParams, cb: &CodebookState, mode: VisualMode, mut f: F) -> Vec<QuantizeRecord>
where
    F: for<'a> FnMut(&mut Tape<'a>, &'a ModelParams, &mut Quantizer<'_>) -> Result<Var>,
{
    let mut q = Quantizer::new(cb, mode, 0);
    let mut tape = tape(PartitionSet::all());
    f(&mut tape, mp, &mut q).unwrap();
    q.into_records()
}

pub fn text_encoder() -> GradCheckReport {
    check(model(), |tape, mp| {
        let b = Batch::new(&[vec![4usize, 5, 6, 2], vec![7, 8, 2]])?;
        let h = encode_text(tape, mp, &b)?;
        probe(tape, h, 0)
    })
}

pub fn image_encoder_with_fusion() -> GradCheckReport {
    check(model(), |tape, mp| {
        let b = Batch::new(&[vec![4usize, 5, 2], vec![7, 2]])?;
        let h = encode_text(tape, mp, &b)?;
        let imgs = ImageBatch::new(mp, &[&image(0), &image(1)])?;
        let f = encode_backbone(tape, mp, &imgs)?;
        let hv = fuse_visual(tape, mp, h, &b.segments, f, imgs.per_image)?;
        probe(tape, hv, 3)
    })
}

pub fn decoder_over_text_and_visual_memory() -> GradCheckReport {
    check(model(), |tape, mp| {
        let b = Batch::new(&[vec![4usize, 5, 2]])?;
        let h = encode_text(tape, mp, &b)?;
        let visual = tape.scale(h, 0.5)?;
        let mem = memory_with_visual(tape, h, &b.segments, Some(visual))?;
        let (inputs, _) = Batch::decoder_io(&[vec![8usize, 9]], BOS, EOS)?;
        let logits = decode_logits(tape, mp, &mem, &inputs)?;
        probe(tape, logits, 5)
    })
}

pub fn translation_loss_with_label_smoothing() -> GradCheckReport {
    check(model(), |tape, mp| {
        let b = Batch::new(&[vec![4usize, 5, 6, 2], vec![7, 2]])?;
        translation_loss(tape, mp, &b, &[vec![8usize, 9, 10], vec![4]], 0.1, BOS, EOS)
    })
}

pub fn stage1_objective() -> GradCheckReport {
    let ex = examples();
    check(model(), |tape, mp| {
        let refs: Vec<&TrainExample> = ex.iter().collect();
        Ok(stage1_loss(tape, mp, &refs, 0.1)?.total)
    })
}

fn tit_forward<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, q: &mut Quantizer<'_>) -> Result<Var> {
    let rec = Batch::new(&[vec![4usize, 9, 6, 2], vec![11, 12, 2]])?;
    let imgs = ImageBatch::new(mp, &[&image(0), &image(1)])?;
    let f = encode_backbone(tape, mp, &imgs)?;
    tit_loss(tape, mp, q, &rec, f, imgs.per_image, &[vec![8usize, 9], vec![5]], 0.1, BOS, EOS)
}

/// The translation loss over image memory under `mode`.
pub fn tit_objective(mp: ModelParams, mode: VisualMode) -> GradCheckReport {
    let cb = codebook();
    let records = recorded(&mp, &cb, mode, tit_forward);
    check(mp, |tape, mp| {
        let mut q = Quantizer::replaying(&cb, mode, records.clone());
        tit_forward(tape, mp, &mut q)
    })
}

/// The stage-3 objective under `mode`, checked over the image side.
pub fn stage3_objective(mode: VisualMode) -> GradCheckReport {
    let mp = model();
    let cb = codebook();
    let ex = examples();
    let refs: Vec<&TrainExample> = ex.iter().collect();
    let records = recorded(&mp, &cb, mode, |t, m, q| Ok(stage3_loss(t, m, q, &refs, 0.25)?.total));
    let visual = PartitionSet::of(&[Partition::ImageEncoder, Partition::Backbone]);
    check_only(mp, visual, |tape, mp| {
        let mut q = Quantizer::replaying(&cb, mode, records.clone());
        Ok(stage3_loss(tape, mp, &mut q, &refs, 0.25)?.total)
    })
}

/// The stage-4 objective under `mode`, with or without the alignment and
/// image-commitment terms.
pub fn stage4_objective(mode: VisualMode, include_l3: bool) -> GradCheckReport {
    let mp = model();
    let cb = codebook();
    let ex = examples();
    let refs: Vec<&TrainExample> = ex.iter().collect();
    let w = LossWeights {
        alpha: 0.75,
        beta: 0.25,
        label_smoothing: 0.1,
        include_l3,
        ema_source: EmaSource::Truth,
    };
    let records = recorded(&mp, &cb, mode, |t, m, q| Ok(stage4_loss(t, m, q, &refs, &w)?.total));
    // Alignment queries are constant text states.
    let trainable = if include_l3 {
        PartitionSet::all().without(Partition::TextEncoder).without(Partition::Embedding)
    } else {
        PartitionSet::all()
    };
    check_only(mp, trainable, |tape, mp| {
        let mut q = Quantizer::replaying(&cb, mode, records.clone());
        Ok(stage4_loss(tape, mp, &mut q, &refs, &w)?.total)
    })
}

fn commitment_forward<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, q: &mut Quantizer<'_>) -> Result<Var> {
    let b = Batch::new(&[vec![4usize, 5, 6, 2], vec![7, 2]])?;
    let h = encode_text(tape, mp, &b)?;
    let text = q.quantize(tape, h, false)?;
    let tc = text_commitment(tape, h, &text.codes, &b.segments)?;
    let st = q.quantize(tape, h, true)?;
    let ita = alignment_loss(tape, st.var, &text.codes.map(|v| v * 0.5), &b.segments)?;
    tape.combine(&[(tc, 0.25), (ita, 1.0)])
}

pub fn commitment_and_alignment_terms() -> GradCheckReport {
    let mp = model();
    let cb = codebook();
    let records = recorded(&mp, &cb, VisualMode::Codebook, commitment_forward);
    check(mp, |tape, mp| {
        let mut q = Quantizer::replaying(&cb, VisualMode::Codebook, records.clone());
        commitment_forward(tape, mp, &mut q)
    })
}

/// Every composite with the number of tensors its check must cover.
pub fn all_composites() -> Vec<(String, GradCheckReport, usize)> {
    let mut out = vec![
        ("text encoder".to_string(), text_encoder(), 10),
        ("image encoder with fusion".to_string(), image_encoder_with_fusion(), 20),
        ("decoder".to_string(), decoder_over_text_and_visual_memory(), 30),
        ("translation loss".to_string(), translation_loss_with_label_smoothing(), 30),
        ("stage 1".to_string(), stage1_objective(), 30),
        ("commitment and alignment".to_string(), commitment_and_alignment_terms(), 10),
    ];
    let modes = [VisualMode::Codebook, VisualMode::Continuous, VisualMode::RandomCodes { seed: 9 }];
    for mode in modes {
        out.push((format!("tit loss {mode:?}"), tit_objective(model(), mode), 40));
        for l3 in [true, false] {
            out.push((format!("stage 4 {mode:?} l3={l3}"), stage4_objective(mode, l3), 30));
        }
    }
    for mode in [VisualMode::Codebook, VisualMode::Continuous] {
        out.push((format!("stage 3 {mode:?}"), stage3_objective(mode), 20));
    }
    out
}
