//! Incremental decoding with cached keys and values.

use crate::codebook::CodebookState;
use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::model::forward::{encode_backbone, encode_text, fuse_visual, memory_with_visual, Batch, ImageBatch};
use crate::model::{AttnIds, ModelParams, NormIds, Quantizer, VisualMode};
use crate::params::ParamId;
use crate::tape::{Tape, LN_VAR_FLOOR};
use crate::tensor::{log_softmax, softmax_in_place, Tensor2D};

/// One encoded example: decoder memory and its per-layer cross keys/values.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub memory: Tensor2D,
    /// Quantization indices of the visual rows (empty without an image or
    /// in continuous mode).
    pub visual_codes: Vec<usize>,
    /// Text-encoder states of the source.
    pub text_states: Tensor2D,
    cross_k: Vec<Tensor2D>,
    cross_v: Vec<Tensor2D>,
}

/// Self-attention keys and values of the prefix decoded so far.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Forward-only evaluation of a trained model.
pub struct Inference<'m> {
    mp: &'m ModelParams,
    cb: Option<&'m CodebookState>,
    mode: VisualMode,
}

fn vecmat(x: &[f64], w: &Tensor2D, b: &Tensor2D) -> Vec<f64> {
    let mut out = b.data().to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm(x: &mut [f64], gamma: &Tensor2D, beta: &Tensor2D) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / var.max(LN_VAR_FLOOR).sqrt();
    for ((v, g), b) in x.iter_mut().zip(gamma.data()).zip(beta.data()) {
        *v = (*v - mean) * inv * g + b;
    }
}

fn add(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

impl<'m> Inference<'m> {
    /// `cb` may be `None` only for text-only decoding or `Continuous` mode.
    pub fn new(mp: &'m ModelParams, cb: Option<&'m CodebookState>, mode: VisualMode) -> Self {
        Self { mp, cb, mode }
    }

    pub fn params(&self) -> &ModelParams {
        self.mp
    }

    fn p(&self, id: ParamId) -> &Tensor2D {
        self.mp.store().value(id)
    }

    /// Encode `source` (already terminated) with an optional image. `index`
    /// seeds random-code sampling so every example draws independently of
    /// evaluation order.
    pub fn encode(&self, source: &[usize], image: Option<&GrayImage>, index: u64) -> Result<EncodedSource> {
        let mp = self.mp;
        let batch = Batch::new(&[source])?;
        let mut tape = Tape::inference();
        let h = encode_text(&mut tape, mp, &batch)?;
        let mut visual_codes = Vec::new();
        let visual = match image {
            None => None,
            Some(img) => {
                let images = ImageBatch::new(mp, &[img])?;
                let feats = encode_backbone(&mut tape, mp, &images)?;
                let hv = fuse_visual(&mut tape, mp, h, &batch.segments, feats, images.per_image)?;
                match (self.mode, self.cb) {
                    (VisualMode::Continuous, _) => Some(hv),
                    (_, Some(cb)) => {
                        let mut q = Quantizer::new(cb, self.mode, index);
                        let z = q.visual_codes(&mut tape, hv, false)?;
                        visual_codes = z.indices;
                        Some(z.var)
                    }
                    (_, None) => return Err(Error::invalid("encode", "visual codes need a codebook")),
                }
            }
        };
        let memory = memory_with_visual(&mut tape, h, &batch.segments, visual)?;
        let memory = tape.value(memory.var).clone();
        let text_states = tape.value(h).clone();
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for layer in &mp.layout.dec {
            let a = &layer.cross;
            cross_k.push(project(&memory, self.p(a.wk), self.p(a.bk))?);
            cross_v.push(project(&memory, self.p(a.wv), self.p(a.bv))?);
        }
        Ok(EncodedSource {
            memory,
            visual_codes,
            text_states,
            cross_k,
            cross_v,
        })
    }

    pub fn start(&self) -> DecoderCache {
        let n = self.mp.layout.dec.len();
        DecoderCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Feed `token` at the next position; returns log-probabilities of the
    /// following token.
    pub fn step(&self, src: &EncodedSource, cache: &mut DecoderCache, token: usize) -> Result<Vec<f64>> {
        let c = self.mp.config();
        let l = &self.mp.layout;
        if cache.len >= c.max_len {
            return Err(Error::invalid("decode", format!("prefix reached max length {}", c.max_len)));
        }
        if token >= c.vocab_size {
            return Err(Error::invalid("decode", format!("token {token} >= vocab {}", c.vocab_size)));
        }
        let d = c.d_model;
        let scale = (d as f64).sqrt();
        let mut x: Vec<f64> = self
            .p(l.embed)
            .row(token)
            .iter()
            .zip(self.p(l.positions).row(cache.len))
            .map(|(e, p)| e * scale + p)
            .collect();
        let t = cache.len + 1;
        for (li, layer) in l.dec.iter().enumerate() {
            let a = &layer.self_attn;
            let q = vecmat(&x, self.p(a.wq), self.p(a.bq));
            cache.keys[li].extend(vecmat(&x, self.p(a.wk), self.p(a.bk)));
            cache.values[li].extend(vecmat(&x, self.p(a.wv), self.p(a.bv)));
            let o = self.attend(&q, &cache.keys[li], &cache.values[li], t, a)?;
            add(&mut x, &o);
            self.norm(&mut x, layer.norm1);

            let a = &layer.cross;
            let q = vecmat(&x, self.p(a.wq), self.p(a.bq));
            let o = self.attend(&q, src.cross_k[li].data(), src.cross_v[li].data(), src.memory.rows(), a)?;
            add(&mut x, &o);
            self.norm(&mut x, layer.norm2);

            let mut h = vecmat(&x, self.p(layer.ffn.w1), self.p(layer.ffn.b1));
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let f = vecmat(&h, self.p(layer.ffn.w2), self.p(layer.ffn.b2));
            add(&mut x, &f);
            self.norm(&mut x, layer.norm3);
        }
        cache.len = t;
        let logits = vecmat(&x, self.p(l.out_w), self.p(l.out_b));
        let mut out = vec![0.0; logits.len()];
        log_softmax(&logits, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "decode" });
        }
        Ok(out)
    }

    fn norm(&self, x: &mut [f64], ids: NormIds) {
        layer_norm(x, self.p(ids.gamma), self.p(ids.beta));
    }

    /// Multi-head attention of one query over `n` cached key/value rows,
    /// followed by the output projection.
    fn attend(&self, q: &[f64], keys: &[f64], values: &[f64], n: usize, a: &AttnIds) -> Result<Vec<f64>> {
        let c = self.mp.config();
        let d = c.d_model;
        let dk = d / c.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut o = vec![0.0; d];
        let mut s = vec![0.0; n];
        for h in 0..c.heads {
            let qh = &q[h * dk..(h + 1) * dk];
            for (j, sj) in s.iter_mut().enumerate() {
                let kh = &keys[j * d + h * dk..j * d + (h + 1) * dk];
                *sj = qh.iter().zip(kh).map(|(x, y)| x * y).sum::<f64>() * scale;
            }
            softmax_in_place(&mut s);
            for (j, p) in s.iter().enumerate() {
                let vh = &values[j * d + h * dk..j * d + (h + 1) * dk];
                for (oi, v) in o[h * dk..(h + 1) * dk].iter_mut().zip(vh) {
                    *oi += p * v;
                }
            }
        }
        Ok(vecmat(&o, self.p(a.wo), self.p(a.bo)))
    }
}

fn project(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        add(out.row_mut(r), b.data());
    }
    Ok(out)
}
