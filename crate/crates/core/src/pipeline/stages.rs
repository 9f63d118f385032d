//! The four training stages.

use std::collections::BTreeMap;

use crate::codebook::CodebookState;
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, translate_examples, DecodeOptions};
use crate::model::{encode_text, Batch, ModelParams, Quantizer, VisualMode};
use crate::pipeline::batching::{data_hash, TrainExample};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::StageConfig;
use crate::pipeline::losses::{stage1_loss, stage3_loss, stage4_loss, LossTerms, LossWeights};
use crate::pipeline::trainer::{train, DevOutcome, StageReport, StepOutcome, Task};
use crate::tape::{Tape, TapeConfig};

const DEV_CHUNK: usize = 64;

fn select<'e>(examples: &'e [TrainExample], idx: &[usize]) -> Vec<&'e TrainExample> {
    idx.iter().map(|&i| &examples[i]).collect()
}

fn require_nonempty(op: &'static str, train: &[TrainExample], dev: &[TrainExample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::invalid(op, "empty training set"));
    }
    if dev.is_empty() {
        return Err(Error::invalid(op, "empty dev set"));
    }
    Ok(())
}

fn gradient_step<'a>(
    tape: &Tape<'a>,
    terms: LossTerms,
    mp: &'a ModelParams,
) -> Result<StepOutcome> {
    let grads = tape.backward(terms.total, mp.store())?;
    Ok(StepOutcome {
        parts: terms.values(tape),
        total: tape.value(terms.total).item(),
        grads: Some(grads),
        ema: terms.ema,
    })
}

/// Mean of per-chunk losses weighted by chunk size.
fn chunked_mean(
    dev: &[TrainExample],
    mut f: impl FnMut(&[&TrainExample]) -> Result<Vec<(&'static str, f64, f64)>>,
) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for chunk in dev.chunks(DEV_CHUNK) {
        let refs: Vec<&TrainExample> = chunk.iter().collect();
        let n = chunk.len() as f64;
        for (name, w, v) in f(&refs)? {
            *sums.entry(name.to_string()).or_insert(0.0) += v * n;
            total += w * v * n;
        }
    }
    let count = dev.len() as f64;
    let mut out: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / count)).collect();
    out.insert("total".into(), total / count);
    Ok(out)
}

struct Stage1<'d> {
    cfg: &'d StageConfig,
    train: &'d [TrainExample],
    dev: &'d [TrainExample],
}

impl Task for Stage1<'_> {
    fn lengths(&self) -> Vec<usize> {
        self.train.iter().map(|e| e.source.len()).collect()
    }

    fn step(&mut self, mp: &ModelParams, _: &CodebookState, batch: &[usize], step: u64) -> Result<StepOutcome> {
        let c = self.cfg;
        let mut tape = Tape::new(TapeConfig::train(c.trainable(), c.dropout, c.seed, step));
        let terms = stage1_loss(&mut tape, mp, &select(self.train, batch), c.label_smoothing)?;
        gradient_step(&tape, terms, mp)
    }

    fn evaluate(&mut self, mp: &ModelParams, _: &CodebookState) -> Result<DevOutcome> {
        let eps = self.cfg.label_smoothing;
        let metrics = chunked_mean(self.dev, |ex| {
            let mut tape = Tape::inference();
            let t = stage1_loss(&mut tape, mp, ex, eps)?;
            Ok(t.values(&tape))
        })?;
        Ok(DevOutcome {
            score: metrics["total"],
            metrics: BTreeMap::from([("dev_loss".to_string(), metrics["total"])]),
        })
    }
}

/// Mean squared distance of each state to its nearest code, plus the
/// states and assignments.
fn quantization_error(
    mp: &ModelParams,
    cb: &CodebookState,
    ex: &[&TrainExample],
) -> Result<(f64, crate::tensor::Tensor2D, Vec<usize>)> {
    let batch = Batch::new(&ex.iter().map(|e| e.source.as_slice()).collect::<Vec<_>>())?;
    let mut tape = Tape::inference();
    let h = encode_text(&mut tape, mp, &batch)?;
    let h = tape.value(h).clone();
    let q = cb.quantize(&h)?;
    let err = q.distances.iter().map(|d| d * d).sum::<f64>() / h.rows() as f64;
    Ok((err, h, q.indices))
}

struct Stage2<'d> {
    train: &'d [TrainExample],
    dev: &'d [TrainExample],
}

impl Task for Stage2<'_> {
    fn lengths(&self) -> Vec<usize> {
        self.train.iter().map(|e| e.source.len()).collect()
    }

    fn step(&mut self, mp: &ModelParams, cb: &CodebookState, batch: &[usize], _: u64) -> Result<StepOutcome> {
        let (err, h, idx) = quantization_error(mp, cb, &select(self.train, batch))?;
        Ok(StepOutcome {
            parts: vec![("quant_error", 1.0, err)],
            total: err,
            grads: None,
            ema: Some((h, idx)),
        })
    }

    fn evaluate(&mut self, mp: &ModelParams, cb: &CodebookState) -> Result<DevOutcome> {
        let metrics = chunked_mean(self.dev, |ex| {
            let (err, _, _) = quantization_error(mp, cb, ex)?;
            Ok(vec![("quant_error", 1.0, err)])
        })?;
        Ok(DevOutcome {
            score: metrics["total"],
            metrics: BTreeMap::from([("quant_error".to_string(), metrics["total"])]),
        })
    }
}

/// Fraction of examples whose visual and text code sets intersect, and
/// fraction whose pooled visual and text states share a nearest code.
pub fn code_agreement(mp: &ModelParams, cb: &CodebookState, examples: &[TrainExample]) -> Result<(f64, f64)> {
    let inf = crate::model::Inference::new(mp, Some(cb), VisualMode::Codebook);
    let (mut overlap, mut pooled) = (0usize, 0usize);
    for (i, ex) in examples.iter().enumerate() {
        let image = ex
            .image
            .as_ref()
            .ok_or_else(|| Error::invalid("code_agreement", "example without image"))?;
        let enc = inf.encode(&ex.source, Some(image), i as u64)?;
        let text = cb.quantize(&enc.text_states)?.indices;
        if enc.visual_codes.iter().any(|c| text.contains(c)) {
            overlap += 1;
        }
        let mean = |rows: &[usize]| {
            let mut m = crate::tensor::Tensor2D::zeros(1, cb.dim());
            for &r in rows {
                m.add_scaled(&cb.codes().slice_rows(r, 1), 1.0 / rows.len() as f64);
            }
            m
        };
        let a = cb.quantize(&mean(&enc.visual_codes))?.indices[0];
        let b = cb.quantize(&mean(&text))?.indices[0];
        if a == b {
            pooled += 1;
        }
    }
    let n = examples.len().max(1) as f64;
    Ok((overlap as f64 / n, pooled as f64 / n))
}

struct Stage3<'d> {
    cfg: &'d StageConfig,
    train: &'d [TrainExample],
    dev: &'d [TrainExample],
}

impl Task for Stage3<'_> {
    fn lengths(&self) -> Vec<usize> {
        self.train.iter().map(|e| e.source.len()).collect()
    }

    fn step(&mut self, mp: &ModelParams, cb: &CodebookState, batch: &[usize], step: u64) -> Result<StepOutcome> {
        let c = self.cfg;
        let mut tape = Tape::new(TapeConfig::train(c.trainable(), c.dropout, c.seed, step));
        let mut q = Quantizer::new(cb, c.visual_mode, step);
        let terms = stage3_loss(&mut tape, mp, &mut q, &select(self.train, batch), c.alpha)?;
        gradient_step(&tape, terms, mp)
    }

    fn evaluate(&mut self, mp: &ModelParams, cb: &CodebookState) -> Result<DevOutcome> {
        let (mode, alpha) = (self.cfg.visual_mode, self.cfg.alpha);
        let mut metrics = chunked_mean(self.dev, |ex| {
            let mut tape = Tape::inference();
            let mut q = Quantizer::new(cb, mode, 0);
            let t = stage3_loss(&mut tape, mp, &mut q, ex, alpha)?;
            Ok(t.values(&tape))
        })?;
        let score = metrics["total"];
        if mode != VisualMode::Continuous {
            let (overlap, pooled) = code_agreement(mp, cb, self.dev)?;
            metrics.insert("code_overlap".into(), overlap);
            metrics.insert("pooled_match".into(), pooled);
        }
        Ok(DevOutcome { score, metrics })
    }
}

struct Stage4<'d> {
    cfg: &'d StageConfig,
    train: &'d [TrainExample],
    dev: &'d [TrainExample],
}

impl Stage4<'_> {
    fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.cfg.alpha,
            beta: self.cfg.beta,
            label_smoothing: self.cfg.label_smoothing,
            include_l3: self.cfg.include_l3,
            ema_source: self.cfg.ema_source,
        }
    }
}

impl Task for Stage4<'_> {
    fn lengths(&self) -> Vec<usize> {
        self.train
            .iter()
            .map(|e| e.source.len() + e.recognized.as_ref().map_or(0, |r| r.len()))
            .collect()
    }

    fn step(&mut self, mp: &ModelParams, cb: &CodebookState, batch: &[usize], step: u64) -> Result<StepOutcome> {
        let c = self.cfg;
        let mut tape = Tape::new(TapeConfig::train(c.trainable(), c.dropout, c.seed, step));
        let mut q = Quantizer::new(cb, c.visual_mode, step);
        let terms = stage4_loss(&mut tape, mp, &mut q, &select(self.train, batch), &self.weights())?;
        gradient_step(&tape, terms, mp)
    }

    fn evaluate(&mut self, mp: &ModelParams, cb: &CodebookState) -> Result<DevOutcome> {
        let n = match self.cfg.dev_limit {
            0 => self.dev.len(),
            k => k.min(self.dev.len()),
        };
        let dev = &self.dev[..n];
        let outs = translate_examples(mp, cb, dev, &DecodeOptions::with_image(1, self.cfg.visual_mode))?;
        let hyps: Vec<&[usize]> = outs.iter().map(|o| o.best.output()).collect();
        let refs: Vec<&[usize]> = dev.iter().map(|e| e.target.as_slice()).collect();
        let bleu = token_bleu(&hyps, &refs)?;
        Ok(DevOutcome {
            score: -bleu,
            metrics: BTreeMap::from([("bleu".to_string(), bleu)]),
        })
    }
}

/// Character BLEU over token ids; ids map one-to-one onto characters, so
/// spelling them as private-use characters preserves n-gram identity.
fn token_bleu(hyps: &[&[usize]], refs: &[&[usize]]) -> Result<f64> {
    let spell = |t: &[usize]| -> String {
        t.iter()
            .filter(|&&i| i != crate::data::PAD)
            .map(|&i| char::from_u32(0xE000 + i as u32).unwrap_or('\u{FFFD}'))
            .collect()
    };
    let h: Vec<String> = hyps.iter().map(|t| spell(t)).collect();
    let r: Vec<String> = refs.iter().map(|t| spell(t)).collect();
    Ok(corpus_bleu(&h, &r)?.bleu)
}

fn check_sources(op: &'static str, data: &[TrainExample]) -> Result<()> {
    if data.iter().any(|e| e.source.is_empty()) {
        return Err(Error::invalid(op, "example with empty source"));
    }
    Ok(())
}

/// Pretrain text encoder, decoder, embeddings and head on parallel text.
pub fn run_stage1(ckpt: &mut Checkpoint, train_set: &[TrainExample], dev: &[TrainExample], cfg: &StageConfig) -> Result<StageReport> {
    expect_stage(cfg, 1)?;
    require_nonempty("stage 1", train_set, dev)?;
    check_sources("stage 1", train_set)?;
    let mut task = Stage1 {
        cfg,
        train: train_set,
        dev,
    };
    train(ckpt, cfg, &mut task, data_hash(train_set))
}

/// Cluster text-encoder states of monolingual sources into the codebook.
/// No network parameter changes.
pub fn run_stage2(ckpt: &mut Checkpoint, mono: &[TrainExample], dev: &[TrainExample], cfg: &StageConfig) -> Result<StageReport> {
    expect_stage(cfg, 2)?;
    require_nonempty("stage 2", mono, dev)?;
    check_sources("stage 2", mono)?;
    let mut task = Stage2 { train: mono, dev };
    train(ckpt, cfg, &mut task, data_hash(mono))
}

/// Align image-side states with the codebook on image/text pairs while the
/// text encoder stays frozen.
pub fn run_stage3(ckpt: &mut Checkpoint, pairs: &[TrainExample], dev: &[TrainExample], cfg: &StageConfig) -> Result<StageReport> {
    expect_stage(cfg, 3)?;
    require_nonempty("stage 3", pairs, dev)?;
    if pairs.iter().chain(dev).any(|e| e.image.is_none()) {
        return Err(Error::invalid("stage 3", "every example needs an image"));
    }
    let mut task = Stage3 { cfg, train: pairs, dev };
    train(ckpt, cfg, &mut task, data_hash(pairs))
}

/// Fine-tune the whole model (except the patch backbone) on text-image
/// translation data with recognized text.
pub fn run_stage4(ckpt: &mut Checkpoint, tit: &[TrainExample], dev: &[TrainExample], cfg: &StageConfig) -> Result<StageReport> {
    expect_stage(cfg, 4)?;
    require_nonempty("stage 4", tit, dev)?;
    if tit.iter().chain(dev).any(|e| e.image.is_none() || e.recognized.is_none()) {
        return Err(Error::invalid("stage 4", "every example needs an image and recognized text"));
    }
    let mut task = Stage4 { cfg, train: tit, dev };
    train(ckpt, cfg, &mut task, data_hash(tit))
}

fn expect_stage(cfg: &StageConfig, stage: u8) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::invalid(
            "run_stage",
            format!("stage-{} config passed to stage {stage}", cfg.stage),
        ));
    }
    Ok(())
}
