//! The shared training loop: batching, updates, evaluation, keep-best,
//! early stopping and interruption.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::codebook::CodebookState;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::{adam_step, OptimizerState, CLIP_NORM};
use crate::params::{Gradients, PartitionSet};
use crate::pipeline::batching::make_batches;
use crate::pipeline::checkpoint::{Checkpoint, LogEntry, ResumeState, StageRecord};
use crate::pipeline::config::StageConfig;
use crate::tensor::Tensor2D;

/// What one training step produced.
pub(crate) struct StepOutcome {
    /// `(name, weight, value)`.
    pub parts: Vec<(&'static str, f64, f64)>,
    pub total: f64,
    pub grads: Option<Gradients>,
    pub ema: Option<(Tensor2D, Vec<usize>)>,
}

pub(crate) struct DevOutcome {
    /// Lower is better.
    pub score: f64,
    pub metrics: BTreeMap<String, f64>,
}

pub(crate) trait Task {
    /// Per-example token counts used for bucketing.
    fn lengths(&self) -> Vec<usize>;
    fn step(&mut self, mp: &ModelParams, cb: &CodebookState, batch: &[usize], step: u64) -> Result<StepOutcome>;
    fn evaluate(&mut self, mp: &ModelParams, cb: &CodebookState) -> Result<DevOutcome>;
}

/// Summary of one stage invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    /// Steps taken so far in this stage, across invocations.
    pub steps: u64,
    /// False when the run stopped early at `stop_after`.
    pub completed: bool,
    /// Total loss of every step.
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub best_step: u64,
    pub best_score: Option<f64>,
    pub batch_hash: u64,
    pub dead_codes: usize,
}

fn chain_hash(prev: u64, batch: &[usize]) -> u64 {
    let mut h = DefaultHasher::new();
    prev.hash(&mut h);
    batch.hash(&mut h);
    h.finish()
}

fn report(st: &ResumeState, cfg: &StageConfig, completed: bool, cb: &CodebookState) -> StageReport {
    StageReport {
        stage: cfg.stage,
        steps: st.step,
        completed,
        losses: st.losses.clone(),
        log: st.log.clone(),
        best_step: st.best_step,
        best_score: st.best_score,
        batch_hash: st.batch_hash,
        dead_codes: cb.dead_codes(),
    }
}

fn evaluate_into(st: &mut ResumeState, ckpt: &Checkpoint, cfg: &StageConfig, task: &mut dyn Task, lr: f64) -> Result<bool> {
    let dev = task.evaluate(&ckpt.params, &ckpt.codebook)?;
    let n = st.pending_steps.max(1) as f64;
    st.log.push(LogEntry {
        step: st.step,
        stage: cfg.stage,
        losses: st.pending.iter().map(|(k, v)| (k.clone(), v / n)).collect(),
        lr,
        dead_codes: ckpt.codebook.dead_codes(),
        dev: dev.metrics,
    });
    st.pending.clear();
    st.pending_steps = 0;
    let improved = st.best_score.is_none_or(|b| dev.score < b);
    if improved {
        st.best_score = Some(dev.score);
        st.best_step = st.step;
        st.best = Some(ckpt.snapshot());
        st.bad_evals = 0;
    } else {
        st.bad_evals += 1;
    }
    Ok(st.bad_evals >= cfg.patience.max(1))
}

/// Run (or resume) one stage on `ckpt`.
pub(crate) fn train(ckpt: &mut Checkpoint, cfg: &StageConfig, task: &mut dyn Task, data_hash: u64) -> Result<StageReport> {
    cfg.validate()?;
    ckpt.check_lineage(cfg)?;
    if let Some(r) = &ckpt.resume {
        if r.data_hash != data_hash {
            return Err(Error::Lineage(format!(
                "stage {} was interrupted on different training data",
                cfg.stage
            )));
        }
    }
    let lengths = task.lengths();
    let trainable = cfg.trainable();
    let frozen = PartitionSet::of(&PartitionSet::all().iter().filter(|p| !trainable.contains(*p)).collect::<Vec<_>>());
    ckpt.codebook.set_gamma(cfg.gamma);

    let mut st = match ckpt.resume.take() {
        Some(r) => r,
        None => {
            if !trainable.is_empty() {
                let c = ckpt.params.config();
                ckpt.optimizer = Some(OptimizerState::new(ckpt.params.store().len(), c.d_model, cfg.warmup));
            }
            let mut r = ResumeState {
                config: cfg.without_stop(),
                step: 0,
                epoch: 0,
                cursor: 0,
                best_score: None,
                best_step: 0,
                bad_evals: 0,
                losses: Vec::new(),
                log: Vec::new(),
                pending: BTreeMap::new(),
                pending_steps: 0,
                data_hash,
                batch_hash: 0,
                best: None,
            };
            evaluate_into(&mut r, ckpt, cfg, task, 0.0)?;
            r
        }
    };

    let mut batches = make_batches(&lengths, cfg.batch_tokens, cfg.seed, st.epoch)?;
    let mut taken = 0u64;
    let mut lr = 0.0;
    while st.step < cfg.max_steps {
        if cfg.stop_after.is_some_and(|n| taken >= n) {
            let out = report(&st, cfg, false, &ckpt.codebook);
            ckpt.resume = Some(st);
            return Ok(out);
        }
        let batch = &batches[st.cursor];
        let step = st.step + 1;
        let out = task.step(&ckpt.params, &ckpt.codebook, batch, step)?;
        if !out.total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        if let Some(mut g) = out.grads {
            g.clip_global_norm(CLIP_NORM);
            let opt = ckpt
                .optimizer
                .as_mut()
                .ok_or_else(|| Error::invalid("train", "gradient stage without optimizer state"))?;
            lr = cfg.lr_scale * opt.next_lr()?;
            adam_step(opt, ckpt.params.store_mut(), &g, lr, frozen)?;
        }
        if let Some((h, idx)) = out.ema {
            ckpt.codebook.ema_update(&h, &idx)?;
        }
        st.losses.push(out.total);
        for (name, _, v) in &out.parts {
            *st.pending.entry(name.to_string()).or_insert(0.0) += v;
        }
        st.pending_steps += 1;
        st.batch_hash = chain_hash(st.batch_hash, batch);
        st.step = step;
        taken += 1;
        st.cursor += 1;
        if st.cursor == batches.len() {
            st.cursor = 0;
            st.epoch += 1;
            batches = make_batches(&lengths, cfg.batch_tokens, cfg.seed, st.epoch)?;
        }
        if (step % cfg.eval_every == 0 || step == cfg.max_steps) && evaluate_into(&mut st, ckpt, cfg, task, lr)? {
            break;
        }
    }
    if let Some(best) = st.best.take() {
        ckpt.restore(&best)?;
    }
    let out = report(&st, cfg, true, &ckpt.codebook);
    ckpt.lineage.push(StageRecord {
        stage: cfg.stage,
        config: cfg.without_stop(),
        steps: st.step,
        best_step: st.best_step,
        best_score: st.best_score,
        data_hash,
        batch_hash: st.batch_hash,
    });
    Ok(out)
}
