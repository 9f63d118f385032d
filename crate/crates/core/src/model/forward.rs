//! Differentiable forward passes over packed batches.
//!
//! Sequences are packed back to back without padding; every attention call
//! carries the per-sequence row ranges, so no position ever sees another
//! sequence.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::codebook::{alignment_on_tape, commitment_on_tape, pooled_codes, CodebookState};
use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::model::{AttnIds, FfnIds, ModelParams, NormIds};
use crate::params::ParamId;
use crate::tape::{AttnSegment, Tape, Var};
use crate::tensor::Tensor2D;

/// Token sequences packed row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    /// `(start, len)` of every sequence in `tokens`.
    pub segments: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::invalid("batch", "empty sequence"));
            }
            segments.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        Ok(Self { tokens, segments })
    }

    /// Decoder inputs `[BOS, y…]` and gold outputs `[y…, EOS]`.
    pub fn decoder_io<S: AsRef<[usize]>>(targets: &[S], bos: usize, eos: usize) -> Result<(Self, Vec<Option<usize>>)> {
        let inputs: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| std::iter::once(bos).chain(t.as_ref().iter().copied()).collect())
            .collect();
        let gold = targets
            .iter()
            .flat_map(|t| t.as_ref().iter().copied().chain(std::iter::once(eos)).map(Some))
            .collect();
        Ok((Self::new(&inputs)?, gold))
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    fn positions(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|&(_, len)| 0..len).collect()
    }
}

/// Images cut into row-major patches, one block of `patches` rows per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub patches: Tensor2D,
    pub count: usize,
    pub per_image: usize,
}

impl ImageBatch {
    pub fn new(mp: &ModelParams, images: &[&GrayImage]) -> Result<Self> {
        let c = mp.config();
        let (ph, pw) = (c.patch_h, c.patch_w);
        let per_image = c.patches();
        let mut data = Vec::with_capacity(images.len() * per_image * ph * pw);
        for img in images {
            if img.width() != c.image_w || img.height() != c.image_h {
                return Err(Error::Shape {
                    op: "encode_image",
                    left: (img.height(), img.width()),
                    right: (c.image_h, c.image_w),
                });
            }
            for gy in 0..c.image_h / ph {
                for gx in 0..c.image_w / pw {
                    for y in 0..ph {
                        for x in 0..pw {
                            data.push(img.get(gx * pw + x, gy * ph + y) as f64 / 255.0);
                        }
                    }
                }
            }
        }
        Ok(Self {
            patches: Tensor2D::from_vec(images.len() * per_image, ph * pw, data)?,
            count: images.len(),
            per_image,
        })
    }
}

/// Decoder cross-attention memory, packed per example.
#[derive(Clone, Debug)]
pub struct Memory {
    pub var: Var,
    pub segments: Vec<(usize, usize)>,
}

/// What the decoder receives in place of the visual states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    /// Nearest codebook entries.
    Codebook,
    /// Uniformly sampled codebook entries.
    RandomCodes { seed: u64 },
    /// The unquantized visual states (no codebook).
    Continuous,
}

/// One recorded quantization: inputs, chosen codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeRecord {
    pub input: Tensor2D,
    pub indices: Vec<usize>,
    pub codes: Tensor2D,
}

/// Quantizes hidden states against a codebook and records every call.
///
/// A replaying quantizer reuses recorded codes. Under straight-through it
/// shifts them with the current input (`h + (codes − h_recorded)`), which
/// makes the forward differentiable for finite-difference checks; otherwise
/// the codes stay constant.
pub struct Quantizer<'c> {
    cb: &'c CodebookState,
    mode: VisualMode,
    step: u64,
    replay: Option<Vec<QuantizeRecord>>,
    records: Vec<QuantizeRecord>,
}

/// Result of quantizing one block of states on the tape.
pub struct Quantized {
    /// Forward value of the codes; gradient flows to the input only under
    /// straight-through.
    pub var: Var,
    /// Code vectors used as stop-gradient targets.
    pub codes: Tensor2D,
    pub indices: Vec<usize>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<'c> Quantizer<'c> {
    pub fn new(cb: &'c CodebookState, mode: VisualMode, step: u64) -> Self {
        Self {
            cb,
            mode,
            step,
            replay: None,
            records: Vec::new(),
        }
    }

    /// Replay `records` in order instead of searching the codebook.
    pub fn replaying(cb: &'c CodebookState, mode: VisualMode, records: Vec<QuantizeRecord>) -> Self {
        Self {
            cb,
            mode,
            step: 0,
            replay: Some(records),
            records: Vec::new(),
        }
    }

    pub fn codebook(&self) -> &CodebookState {
        self.cb
    }

    pub fn mode(&self) -> VisualMode {
        self.mode
    }

    pub fn records(&self) -> &[QuantizeRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<QuantizeRecord> {
        self.records
    }

    fn choose(&mut self, h: &Tensor2D, random: bool) -> Result<(Tensor2D, Tensor2D, Vec<usize>)> {
        let call = self.records.len();
        if let Some(replay) = &self.replay {
            let rec = replay
                .get(call)
                .ok_or_else(|| Error::invalid("quantize", "replay ran out of recorded calls"))?;
            rec.input.ensure_shape("quantize replay", h)?;
            let mut value = h.clone();
            value.add_assign(&rec.codes);
            value.add_scaled(&rec.input, -1.0);
            let out = (value, rec.codes.clone(), rec.indices.clone());
            self.records.push(rec.clone());
            return Ok(out);
        }
        let q = match (random, self.mode) {
            (true, VisualMode::RandomCodes { seed }) => {
                self.cb.random_codes(h.rows(), mix(mix(seed, self.step), call as u64))?
            }
            _ => self.cb.quantize(h)?,
        };
        self.records.push(QuantizeRecord {
            input: h.clone(),
            indices: q.indices.clone(),
            codes: q.codes.clone(),
        });
        Ok((q.codes.clone(), q.codes, q.indices))
    }

    /// Nearest codes for `h`, with straight-through gradient when asked.
    pub fn quantize(&mut self, tape: &mut Tape<'_>, h: Var, straight_through: bool) -> Result<Quantized> {
        self.quantize_inner(tape, h, straight_through, false)
    }

    /// Codes fed to the decoder for visual states, honoring the mode.
    /// `Continuous` returns `h` itself.
    pub fn visual_codes(&mut self, tape: &mut Tape<'_>, h: Var, straight_through: bool) -> Result<Quantized> {
        if self.mode == VisualMode::Continuous {
            return Ok(Quantized {
                var: h,
                codes: tape.value(h).clone(),
                indices: Vec::new(),
            });
        }
        self.quantize_inner(tape, h, straight_through, true)
    }

    fn quantize_inner(&mut self, tape: &mut Tape<'_>, h: Var, straight_through: bool, random: bool) -> Result<Quantized> {
        let (value, codes, indices) = self.choose(tape.value(h), random)?;
        let var = if straight_through {
            tape.straight_through(h, value)?
        } else {
            tape.constant(codes.clone())?
        };
        Ok(Quantized { var, codes, indices })
    }
}

fn linear<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let s = mp.store();
    let wv = tape.param(s, w)?;
    let bv = tape.param(s, b)?;
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

fn norm<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, x: Var, ids: NormIds) -> Result<Var> {
    let g = tape.param(mp.store(), ids.gamma)?;
    let b = tape.param(mp.store(), ids.beta)?;
    tape.layer_norm(x, g, b)
}

fn mha<'a>(
    tape: &mut Tape<'a>,
    mp: &'a ModelParams,
    ids: &AttnIds,
    xq: Var,
    xkv: Var,
    heads: usize,
    layout: Rc<Vec<AttnSegment>>,
) -> Result<Var> {
    let q = linear(tape, mp, xq, ids.wq, ids.bq)?;
    let k = linear(tape, mp, xkv, ids.wk, ids.bk)?;
    let v = linear(tape, mp, xkv, ids.wv, ids.bv)?;
    let o = tape.attention(q, k, v, heads, layout)?;
    linear(tape, mp, o, ids.wo, ids.bo)
}

fn ffn<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, ids: &FfnIds, x: Var, gelu: bool) -> Result<Var> {
    let h = linear(tape, mp, x, ids.w1, ids.b1)?;
    let h = if gelu { tape.gelu(h)? } else { tape.relu(h)? };
    linear(tape, mp, h, ids.w2, ids.b2)
}

fn self_layout(segments: &[(usize, usize)], causal: bool) -> Rc<Vec<AttnSegment>> {
    Rc::new(
        segments
            .iter()
            .map(|&(s, l)| AttnSegment {
                causal,
                ..AttnSegment::full(s, l, s, l)
            })
            .collect(),
    )
}

fn embed<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, batch: &Batch) -> Result<Var> {
    let c = mp.config();
    if let Some(&(_, len)) = batch.segments.iter().find(|&&(_, l)| l > c.max_len) {
        return Err(Error::invalid("embed", format!("sequence of {len} exceeds max length {}", c.max_len)));
    }
    let table = tape.param(mp.store(), mp.layout.embed)?;
    let pos_table = tape.param(mp.store(), mp.layout.positions)?;
    let words = tape.gather_rows(table, Rc::new(batch.tokens.clone()))?;
    let words = tape.scale(words, (c.d_model as f64).sqrt())?;
    let pos = tape.gather_rows(pos_table, Rc::new(batch.positions()))?;
    let x = tape.add(words, pos)?;
    tape.dropout(x)
}

/// Post-norm transformer encoder over packed token sequences.
pub fn encode_text<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, batch: &Batch) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("encode_text", "empty batch"));
    }
    let layout = self_layout(&batch.segments, false);
    let mut x = embed(tape, mp, batch)?;
    for layer in &mp.layout.enc {
        let a = mha(tape, mp, &layer.attn, x, x, mp.config().heads, layout.clone())?;
        let a = tape.dropout(a)?;
        let r = tape.add(x, a)?;
        x = norm(tape, mp, r, layer.norm1)?;
        let f = ffn(tape, mp, &layer.ffn, x, false)?;
        let f = tape.dropout(f)?;
        let r = tape.add(x, f)?;
        x = norm(tape, mp, r, layer.norm2)?;
    }
    Ok(x)
}

/// Pre-norm patch transformer with a final norm; `per_image` rows per image.
pub fn encode_backbone<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, images: &ImageBatch) -> Result<Var> {
    if images.count == 0 {
        return Err(Error::invalid("encode_image", "no images"));
    }
    let l = &mp.layout;
    let p = images.per_image;
    let patches = tape.constant(images.patches.clone())?;
    let x = linear(tape, mp, patches, l.patch_w, l.patch_b)?;
    let pos_table = tape.param(mp.store(), l.patch_pos)?;
    let pos_idx: Vec<usize> = (0..images.count).flat_map(|_| 0..p).collect();
    let pos = tape.gather_rows(pos_table, Rc::new(pos_idx))?;
    let mut x = tape.add(x, pos)?;
    let segments: Vec<(usize, usize)> = (0..images.count).map(|i| (i * p, p)).collect();
    let layout = self_layout(&segments, false);
    for layer in &l.vis {
        let h = norm(tape, mp, x, layer.norm1)?;
        let a = mha(tape, mp, &layer.attn, h, h, mp.config().vis_heads, layout.clone())?;
        let a = tape.dropout(a)?;
        x = tape.add(x, a)?;
        let h = norm(tape, mp, x, layer.norm2)?;
        let f = ffn(tape, mp, &layer.ffn, h, true)?;
        let f = tape.dropout(f)?;
        x = tape.add(x, f)?;
    }
    norm(tape, mp, x, l.vis_norm)
}

/// `H_v = MHA(H_e, W_v·F, W_v·F)` with the text states as queries: one
/// visual row per text row, attending over that example's patches.
pub fn fuse_visual<'a>(
    tape: &mut Tape<'a>,
    mp: &'a ModelParams,
    text: Var,
    text_segments: &[(usize, usize)],
    features: Var,
    per_image: usize,
) -> Result<Var> {
    let rows = tape.value(features).rows();
    if rows != text_segments.len() * per_image {
        return Err(Error::Shape {
            op: "fuse_visual",
            left: (text_segments.len() * per_image, per_image),
            right: tape.value(features).shape(),
        });
    }
    let w_v = tape.param(mp.store(), mp.layout.w_v)?;
    let projected = tape.matmul(features, w_v)?;
    let layout = Rc::new(
        text_segments
            .iter()
            .enumerate()
            .map(|(i, &(s, l))| AttnSegment::full(s, l, i * per_image, per_image))
            .collect::<Vec<_>>(),
    );
    mha(tape, mp, &mp.layout.fuse, text, projected, mp.config().heads, layout)
}

/// Per-example memory `[text_i; visual_i]`, or the text states alone.
pub fn memory_with_visual(
    tape: &mut Tape<'_>,
    text: Var,
    text_segments: &[(usize, usize)],
    visual: Option<Var>,
) -> Result<Memory> {
    let Some(visual) = visual else {
        return Ok(Memory {
            var: text,
            segments: text_segments.to_vec(),
        });
    };
    let n = tape.value(text).rows();
    if tape.value(visual).shape() != tape.value(text).shape() {
        return Err(Error::Shape {
            op: "memory",
            left: tape.value(text).shape(),
            right: tape.value(visual).shape(),
        });
    }
    let both = tape.concat_rows(&[text, visual])?;
    let mut idx = Vec::with_capacity(2 * n);
    let mut segments = Vec::with_capacity(text_segments.len());
    for &(s, l) in text_segments {
        segments.push((idx.len(), 2 * l));
        idx.extend(s..s + l);
        idx.extend(n + s..n + s + l);
    }
    let var = tape.gather_rows(both, Rc::new(idx))?;
    Ok(Memory { var, segments })
}

/// Post-norm decoder with causal self-attention and cross-attention over
/// `memory`; returns unnormalized next-token logits per input row.
pub fn decode_logits<'a>(tape: &mut Tape<'a>, mp: &'a ModelParams, memory: &Memory, inputs: &Batch) -> Result<Var> {
    if memory.segments.len() != inputs.len() {
        return Err(Error::invalid(
            "decode",
            format!("{} memories for {} target sequences", memory.segments.len(), inputs.len()),
        ));
    }
    if memory.segments.iter().any(|&(_, l)| l == 0) {
        return Err(Error::invalid("decode", "empty cross-attention memory"));
    }
    let heads = mp.config().heads;
    let self_l = self_layout(&inputs.segments, true);
    let cross_l = Rc::new(
        inputs
            .segments
            .iter()
            .zip(&memory.segments)
            .map(|(&(qs, ql), &(ks, kl))| AttnSegment::full(qs, ql, ks, kl))
            .collect::<Vec<_>>(),
    );
    let mut y = embed(tape, mp, inputs)?;
    for layer in &mp.layout.dec {
        let a = mha(tape, mp, &layer.self_attn, y, y, heads, self_l.clone())?;
        let a = tape.dropout(a)?;
        let r = tape.add(y, a)?;
        y = norm(tape, mp, r, layer.norm1)?;
        let c = mha(tape, mp, &layer.cross, y, memory.var, heads, cross_l.clone())?;
        let c = tape.dropout(c)?;
        let r = tape.add(y, c)?;
        y = norm(tape, mp, r, layer.norm2)?;
        let f = ffn(tape, mp, &layer.ffn, y, false)?;
        let f = tape.dropout(f)?;
        let r = tape.add(y, f)?;
        y = norm(tape, mp, r, layer.norm3)?;
    }
    linear(tape, mp, y, mp.layout.out_w, mp.layout.out_b)
}

/// Label-smoothed NLL of `targets` given source `sources` and no image.
pub fn translation_loss<'a, S: AsRef<[usize]>>(
    tape: &mut Tape<'a>,
    mp: &'a ModelParams,
    sources: &Batch,
    targets: &[S],
    epsilon: f64,
    bos: usize,
    eos: usize,
) -> Result<Var> {
    let h = encode_text(tape, mp, sources)?;
    let memory = memory_with_visual(tape, h, &sources.segments, None)?;
    let (inputs, gold) = Batch::decoder_io(targets, bos, eos)?;
    let logits = decode_logits(tape, mp, &memory, &inputs)?;
    tape.label_smoothed_ce(logits, &gold, epsilon)
}

/// Label-smoothed NLL of `targets` given recognized text and images, with
/// the decoder reading `[Ĥ_e; codes(H_v)]`. Returns the loss and the
/// visual states' quantization.
#[allow(clippy::too_many_arguments)]
pub fn tit_loss<'a, S: AsRef<[usize]>>(
    tape: &mut Tape<'a>,
    mp: &'a ModelParams,
    quantizer: &mut Quantizer<'_>,
    recognized: &Batch,
    features: Var,
    per_image: usize,
    targets: &[S],
    epsilon: f64,
    bos: usize,
    eos: usize,
) -> Result<Var> {
    let h = encode_text(tape, mp, recognized)?;
    let hv = fuse_visual(tape, mp, h, &recognized.segments, features, per_image)?;
    let zq = quantizer.visual_codes(tape, hv, mp.config().straight_through)?;
    let memory = memory_with_visual(tape, h, &recognized.segments, Some(zq.var))?;
    let (inputs, gold) = Batch::decoder_io(targets, bos, eos)?;
    let logits = decode_logits(tape, mp, &memory, &inputs)?;
    tape.label_smoothed_ce(logits, &gold, epsilon)
}

/// `||mean(quantized visual) − sg(mean(text codes))||²` averaged over
/// examples. `visual` is the (straight-through) quantized image side.
pub fn alignment_loss(
    tape: &mut Tape<'_>,
    visual: Var,
    text_codes: &Tensor2D,
    segments: &[(usize, usize)],
) -> Result<Var> {
    let mut target = Tensor2D::zeros(segments.len(), text_codes.cols());
    for (i, &(s, l)) in segments.iter().enumerate() {
        let row = target.row_mut(i);
        for r in s..s + l {
            for (t, v) in row.iter_mut().zip(text_codes.row(r)) {
                *t += v;
            }
        }
        row.iter_mut().for_each(|t| *t /= l as f64);
    }
    alignment_on_tape(tape, visual, Rc::new(segments.to_vec()), target)
}

/// Commitment of `h` to stop-gradient `codes`, mean per position then
/// per example.
pub fn text_commitment(tape: &mut Tape<'_>, h: Var, codes: &Tensor2D, segments: &[(usize, usize)]) -> Result<Var> {
    commitment_on_tape(tape, h, codes.clone(), segments)
}

/// Pooled nearest codes of packed states, one row per segment.
pub fn pooled_text_codes(cb: &CodebookState, h: &Tensor2D, segments: &[(usize, usize)]) -> Result<Tensor2D> {
    pooled_codes(cb, h, segments)
}
