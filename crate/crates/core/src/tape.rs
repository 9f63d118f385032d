//! Tape-based reverse-mode differentiation over [`Tensor2D`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. [`Tape::backward`] walks the record once in reverse and returns
//! gradients for the parameters that were registered as trainable.
//!
//! Parameters from frozen partitions enter the tape as constants, so a
//! frozen partition never produces a differentiable node.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore, Partition, PartitionSet};
use crate::tensor::{gemm, gemm_strided, log_softmax, softmax_in_place, Tensor2D};

/// Additive bias applied to masked attention scores.
pub const MASK_BIAS: f64 = -1e9;
/// Layer-norm variance floor; rows with smaller variance normalize to zero.
pub const LN_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One query/key block of a packed attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub causal: bool,
    /// `true` admits the key; `None` admits all keys.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnSegment {
    pub fn full(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        Self {
            q_start,
            q_len,
            k_start,
            k_len,
            causal: false,
            key_mask: None,
        }
    }

    fn admitted(&self, qi: usize, kj: usize) -> bool {
        if self.causal && kj > qi {
            return false;
        }
        self.key_mask.as_ref().is_none_or(|m| m[kj])
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<Vec<AttnSegment>>,
        probs: Vec<Vec<f64>>,
    },
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    Dropout(Var, Vec<f64>),
    StraightThrough(Var),
    SegmentMean(Var, Rc<Vec<(usize, usize)>>),
    WeightedRowSqDist {
        x: Var,
        target: Tensor2D,
        weights: Vec<f64>,
    },
    LabelSmoothedCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        epsilon: f64,
        probs: Vec<f64>,
        count: usize,
    },
    Combine(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Tensor2D>,
    op: Op,
    needs_grad: bool,
}

/// Forward-pass settings for one tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapeConfig {
    pub trainable: PartitionSet,
    /// Dropout rate; 0 disables dropout.
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
}

impl TapeConfig {
    pub fn inference() -> Self {
        Self {
            trainable: PartitionSet::empty(),
            dropout: 0.0,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(trainable: PartitionSet, dropout: f64, seed: u64, step: u64) -> Self {
        Self {
            trainable,
            dropout,
            seed,
            step,
        }
    }
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    config: TapeConfig,
    param_vars: HashMap<ParamId, Var>,
    param_leaves: Vec<(ParamId, Partition)>,
    dropout_ops: u64,
}

impl<'a> Tape<'a> {
    pub fn new(config: TapeConfig) -> Self {
        Self {
            nodes: Vec::new(),
            config,
            param_vars: HashMap::new(),
            param_leaves: Vec::new(),
            dropout_ops: 0,
        }
    }

    pub fn inference() -> Self {
        Self::new(TapeConfig::inference())
    }

    pub fn config(&self) -> &TapeConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Parameters recorded as differentiable leaves on this tape.
    pub fn param_leaves(&self) -> &[(ParamId, Partition)] {
        &self.param_leaves
    }

    fn push(&mut self, value: Cow<'a, Tensor2D>, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor2D) -> Result<Var> {
        self.push(Cow::Owned(t), Op::Leaf, false, "constant")
    }

    pub fn constant_ref(&mut self, t: &'a Tensor2D) -> Result<Var> {
        self.push(Cow::Borrowed(t), Op::Leaf, false, "constant")
    }

    /// Register a parameter. Trainable partitions become differentiable
    /// leaves, frozen ones constants. Each parameter is recorded once per
    /// tape.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = if self.config.trainable.contains(p.partition) {
            let v = self.push(Cow::Borrowed(&p.value), Op::Param(id), true, "param")?;
            self.param_leaves.push((id, p.partition));
            v
        } else {
            self.constant_ref(&p.value)?
        };
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let mut out = Tensor2D::zeros(sa.0, sb.1);
        gemm(self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.ng(&[a, b]);
        self.push(Cow::Owned(out), Op::MatMul(a, b), ng, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_shape("add", self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(Cow::Owned(out), Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_shape("sub", self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -1.0);
        let ng = self.ng(&[a, b]);
        self.push(Cow::Owned(out), Op::Sub(a, b), ng, "sub")
    }

    /// `a + row` with `row` (1 × n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Shape {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(Cow::Owned(out), Op::AddRow(a, row), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), Op::Relu(a), ng, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu(x).0);
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), Op::Gelu(a), ng, "gelu")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows();
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), Op::Softmax(a), ng, "softmax")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (1 × d).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, d) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: (n, d),
                    right: self.shape(p),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor2D::zeros(n, d);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut floored = vec![false; n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            floored[r] = var < LN_VAR_FLOOR;
            let inv = 1.0 / var.max(LN_VAR_FLOOR).sqrt();
            inv_std[r] = inv;
            let orow = out.row_mut(r);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                orow[c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                floored,
            },
            ng,
            "layer_norm",
        )
    }

    /// Packed multi-head scaled dot-product attention over already
    /// projected `q`, `k`, `v`. Each segment attends only within its own
    /// query and key ranges.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<Vec<AttnSegment>>) -> Result<Var> {
        let (nq, d) = self.shape(q);
        let (nk, dk_) = self.shape(k);
        if dk_ != d || self.shape(v) != (nk, d) {
            return Err(Error::Shape {
                op: "attention",
                left: (nq, d),
                right: self.shape(v),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("attention", format!("{d} not divisible into {heads} heads")));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Tensor2D::zeros(nq, d);
        let mut probs = Vec::with_capacity(layout.len() * heads);
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for seg in layout.iter() {
                if seg.q_start + seg.q_len > nq || seg.k_start + seg.k_len > nk {
                    return Err(Error::invalid("attention", "segment outside inputs"));
                }
                if seg.key_mask.as_ref().is_some_and(|m| m.len() != seg.k_len) {
                    return Err(Error::invalid("attention", "key mask length differs from key count"));
                }
                for qi in 0..seg.q_len {
                    if !(0..seg.k_len).any(|kj| seg.admitted(qi, kj)) {
                        return Err(Error::invalid("attention", format!("query row {qi} admits no key")));
                    }
                }
                for h in 0..heads {
                    let mut p = vec![0.0; seg.q_len * seg.k_len];
                    gemm_strided(
                        seg.q_len,
                        dk,
                        seg.k_len,
                        qv,
                        seg.q_start * d + h * dk,
                        d as isize,
                        1,
                        kv,
                        seg.k_start * d + h * dk,
                        1,
                        d as isize,
                        &mut p,
                        0,
                        seg.k_len as isize,
                        false,
                    );
                    for qi in 0..seg.q_len {
                        let row = &mut p[qi * seg.k_len..(qi + 1) * seg.k_len];
                        for (kj, s) in row.iter_mut().enumerate() {
                            *s *= scale;
                            if !seg.admitted(qi, kj) {
                                *s += MASK_BIAS;
                            }
                        }
                        softmax_in_place(row);
                    }
                    gemm_strided(
                        seg.q_len,
                        seg.k_len,
                        dk,
                        &p,
                        0,
                        seg.k_len as isize,
                        1,
                        vv,
                        seg.k_start * d + h * dk,
                        d as isize,
                        1,
                        out.data_mut(),
                        seg.q_start * d + h * dk,
                        d as isize,
                        false,
                    );
                    probs.push(p);
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            ng,
            "attention",
        )
    }

    /// Rows of `table` selected by `idx` (embedding lookup, reordering).
    pub fn gather_rows(&mut self, table: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (n, d) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather_rows", format!("index {bad} >= {n} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor2D::from_vec(idx.len(), d, data)?;
        let ng = self.ng(&[table]);
        self.push(Cow::Owned(out), Op::GatherRows(table, idx), ng, "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor2D> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor2D::vstack(&tensors)?;
        let ng = self.ng(parts);
        self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    /// Inverted dropout. Identity when the tape's rate is 0; the mask is a
    /// pure function of (seed, step, dropout call index).
    pub fn dropout(&mut self, a: Var) -> Result<Var> {
        let rate = self.config.dropout;
        if rate == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let op_id = self.dropout_ops;
        self.dropout_ops += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.config.step);
        rng.set_word_pos((op_id as u128) << 40);
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = x.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), Op::Dropout(a, mask), ng, "dropout")
    }

    /// Forward value `codes`, backward identity into `h`.
    pub fn straight_through(&mut self, h: Var, codes: Tensor2D) -> Result<Var> {
        self.value(h).ensure_shape("straight_through", &codes)?;
        let ng = self.ng(&[h]);
        self.push(Cow::Owned(codes), Op::StraightThrough(h), ng, "straight_through")
    }

    /// Mean of each `(start, len)` row block; one output row per segment.
    pub fn segment_mean(&mut self, a: Var, segments: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let (n, d) = self.shape(a);
        let x = self.value(a);
        let mut out = Tensor2D::zeros(segments.len(), d);
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > n {
                return Err(Error::invalid("segment_mean", format!("segment ({start}, {len}) of {n} rows")));
            }
            let orow = out.row_mut(s);
            for r in start..start + len {
                for (o, v) in orow.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o /= len as f64);
        }
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), Op::SegmentMean(a, segments), ng, "segment_mean")
    }

    /// `Σ_r w_r · ||x_r − target_r||²` with `target` held constant.
    pub fn weighted_row_sq_dist(&mut self, x: Var, target: Tensor2D, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        xv.ensure_shape("weighted_row_sq_dist", &target)?;
        if weights.len() != xv.rows() {
            return Err(Error::Shape {
                op: "weighted_row_sq_dist",
                left: xv.shape(),
                right: (weights.len(), 1),
            });
        }
        let mut total = 0.0;
        for (r, w) in weights.iter().enumerate() {
            let s: f64 = xv.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
            total += w * s;
        }
        let ng = self.ng(&[x]);
        self.push(
            Cow::Owned(Tensor2D::scalar(total)),
            Op::WeightedRowSqDist { x, target, weights },
            ng,
            "weighted_row_sq_dist",
        )
    }

    /// Mean label-smoothed cross-entropy over rows whose target is `Some`.
    pub fn label_smoothed_ce(&mut self, logits: Var, targets: &[Option<usize>], epsilon: f64) -> Result<Var> {
        let (n, vocab) = self.shape(logits);
        if targets.len() != n {
            return Err(Error::Shape {
                op: "label_smoothed_ce",
                left: (n, vocab),
                right: (targets.len(), 1),
            });
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::invalid("label_smoothed_ce", format!("epsilon {epsilon} outside [0, 1)")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::invalid("label_smoothed_ce", "no unmasked target positions"));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut logp = vec![0.0; vocab];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::invalid("label_smoothed_ce", format!("target {t} >= vocab {vocab}")));
            }
            log_softmax(lv.row(r), &mut logp);
            let sum_logp: f64 = logp.iter().sum();
            total -= (1.0 - epsilon) * logp[t] + epsilon / vocab as f64 * sum_logp;
            for (p, l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Cow::Owned(Tensor2D::scalar(total / count as f64)),
            Op::LabelSmoothedCe {
                logits,
                targets: targets.to_vec(),
                epsilon,
                probs,
                count,
            },
            ng,
            "label_smoothed_ce",
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.shape(v) != (1, 1) {
                return Err(Error::Shape {
                    op: "combine",
                    left: (1, 1),
                    right: self.shape(v),
                });
            }
            total += w * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        self.push(Cow::Owned(Tensor2D::scalar(total)), Op::Combine(terms.to_vec()), ng, "combine")
    }

    /// Reverse pass from the scalar `loss`. Every trainable parameter of
    /// `store` receives a gradient; unused ones get exact zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: (1, 1),
                right: self.shape(loss),
            });
        }
        let mut grads: Vec<Option<Tensor2D>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2D::scalar(1.0));
        let mut out = Gradients::new(store.len());
        for (id, p) in store.iter() {
            if self.config.trainable.contains(p.partition) {
                out.set(id, Tensor2D::zeros(p.value.rows(), p.value.cols()));
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor2D>], v: Var, f: impl FnOnce(&mut Tensor2D)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor2D::zeros(r, c));
        f(slot);
    }

    fn backward_op(&self, i: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>], out: &mut Gradients) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if let Some(existing) = out.get(*id) {
                    let mut sum = existing.clone();
                    sum.add_assign(g);
                    out.set(*id, sum);
                } else {
                    out.set(*id, g.clone());
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                self.accum_with(grads, a, |ga| gemm(g, false, bv, true, ga, true));
                self.accum_with(grads, b, |gb| gemm(av, true, g, false, gb, true));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                self.accum_with(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, g.map(|v| v * s));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (o, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (o, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *o *= gelu(*xv).1;
                }
                self.accum(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Tensor2D::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, gg)| p * gg).sum();
                    for ((o, p), gg) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = p * (gg - dot);
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                floored,
            } => {
                let (n, d) = g.shape();
                let gv = self.value(*gamma).data();
                self.accum_with(grads, *gamma, |gg| {
                    for r in 0..n {
                        for c in 0..d {
                            gg.data_mut()[c] += g.get(r, c) * xhat[r * d + c];
                        }
                    }
                });
                self.accum_with(grads, *beta, |gb| {
                    for r in 0..n {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
                self.accum_with(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dxhat[c] = g.get(r, c) * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mean_dx = if floored[r] {
                            0.0
                        } else {
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64
                        };
                        let row = gx.row_mut(r);
                        for c in 0..d {
                            row[c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, layout, probs, g, grads),
            Op::GatherRows(table, idx) => {
                self.accum_with(grads, *table, |gt| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in gt.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    self.accum(grads, p, g.slice_rows(start, rows));
                    start += rows;
                }
            }
            Op::Dropout(a, mask) => {
                let mut d = g.clone();
                for (o, m) in d.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                self.accum(grads, *a, d);
            }
            Op::StraightThrough(h) => self.accum(grads, *h, g.clone()),
            Op::SegmentMean(a, segments) => {
                self.accum_with(grads, *a, |ga| {
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for r in start..start + len {
                            for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o += v * inv;
                            }
                        }
                    }
                });
            }
            Op::WeightedRowSqDist { x, target, weights } => {
                let gs = g.item();
                let xv = self.value(*x);
                self.accum_with(grads, *x, |gx| {
                    for (r, w) in weights.iter().enumerate() {
                        for ((o, a), b) in gx.row_mut(r).iter_mut().zip(xv.row(r)).zip(target.row(r)) {
                            *o += gs * w * 2.0 * (a - b);
                        }
                    }
                });
            }
            Op::LabelSmoothedCe {
                logits,
                targets,
                epsilon,
                probs,
                count,
            } => {
                let gs = g.item() / *count as f64;
                let vocab = self.shape(*logits).1;
                let off = epsilon / vocab as f64;
                self.accum_with(grads, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for (c, o) in gl.row_mut(r).iter_mut().enumerate() {
                            let q = off + if c == t { 1.0 - epsilon } else { 0.0 };
                            *o += gs * (p[c] - q);
                        }
                    }
                });
            }
            Op::Combine(terms) => {
                let gs = g.item();
                for &(v, w) in terms {
                    self.accum(grads, v, Tensor2D::scalar(gs * w));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &[AttnSegment],
        probs: &[Vec<f64>],
        g: &Tensor2D,
        grads: &mut [Option<Tensor2D>],
    ) {
        let (nq, d) = self.shape(q);
        let nk = self.shape(k).0;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = Tensor2D::zeros(nq, d);
        let mut dkm = Tensor2D::zeros(nk, d);
        let mut dv = Tensor2D::zeros(nk, d);
        let gd = g.data();
        for (si, seg) in layout.iter().enumerate() {
            let (ql, kl) = (seg.q_len, seg.k_len);
            for h in 0..heads {
                let p = &probs[si * heads + h];
                let q_off = seg.q_start * d + h * dk;
                let k_off = seg.k_start * d + h * dk;
                // dV += Pᵀ dO
                gemm_strided(kl, ql, dk, p, 0, 1, kl as isize, gd, q_off, d as isize, 1, dv.data_mut(), k_off, d as isize, true);
                // dP = dO Vᵀ
                let mut ds = vec![0.0; ql * kl];
                gemm_strided(ql, dk, kl, gd, q_off, d as isize, 1, vv, k_off, 1, d as isize, &mut ds, 0, kl as isize, false);
                for qi in 0..ql {
                    let pr = &p[qi * kl..(qi + 1) * kl];
                    let dr = &mut ds[qi * kl..(qi + 1) * kl];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, pp) in dr.iter_mut().zip(pr) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                // dQ += dS K ; dK += dSᵀ Q
                gemm_strided(ql, kl, dk, &ds, 0, kl as isize, 1, kv, k_off, d as isize, 1, dq.data_mut(), q_off, d as isize, true);
                gemm_strided(kl, ql, dk, &ds, 0, 1, kl as isize, qv, q_off, d as isize, 1, dkm.data_mut(), k_off, d as isize, true);
            }
        }
        self.accum(grads, q, dq);
        self.accum(grads, k, dkm);
        self.accum(grads, v, dv);
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor2D {
        Tensor2D::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let mut tape = Tape::inference();
        let x = tape.constant(t(1, 4, &[3.0; 4])).unwrap();
        let g = tape.constant(Tensor2D::filled(1, 4, 1.0)).unwrap();
        let b = tape.constant(Tensor2D::zeros(1, 4)).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn attention_retrieves_matching_key() {
        // One query aligned with key 1; other keys orthogonal. At large
        // scale the softmax is effectively one-hot.
        let big = 50.0;
        let mut tape = Tape::inference();
        let q = tape.constant(t(1, 2, &[big, 0.0])).unwrap();
        let k = tape.constant(t(3, 2, &[0.0, big, big, 0.0, 0.0, -big])).unwrap();
        let v = tape.constant(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let layout = Rc::new(vec![AttnSegment::full(0, 1, 0, 3)]);
        let o = tape.attention(q, k, v, 1, layout).unwrap();
        // Brute-force oracle: scores q·k/sqrt(2), softmax, weighted sum.
        let scores: Vec<f64> = [0.0, big * big, 0.0].iter().map(|s| s / 2f64.sqrt()).collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let expect = [
            (w[0] * 1.0 + w[1] * 3.0 + w[2] * 5.0) / z,
            (w[0] * 2.0 + w[1] * 4.0 + w[2] * 6.0) / z,
        ];
        let got = tape.value(o).data();
        assert!((got[0] - expect[0]).abs() < 1e-12 && (got[1] - expect[1]).abs() < 1e-12);
        assert!((got[0] - 3.0).abs() < 1e-9 && (got[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn attention_rejects_row_without_keys() {
        let mut tape = Tape::inference();
        let q = tape.constant(Tensor2D::zeros(1, 2)).unwrap();
        let mut seg = AttnSegment::full(0, 1, 0, 1);
        seg.key_mask = Some(vec![false]);
        assert!(tape.attention(q, q, q, 1, Rc::new(vec![seg])).is_err());
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor2D::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor2D::zeros(2, 3)).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut tape = Tape::inference();
        assert!(tape.constant(t(1, 2, &[1.0, f64::NAN])).is_err());
    }

    #[test]
    fn dropout_identity_when_disabled() {
        let store = ParamStore::new();
        let _ = &store;
        let mut tape = Tape::new(TapeConfig::train(PartitionSet::all(), 0.0, 1, 1));
        let x = tape.constant(t(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(tape.dropout(x).unwrap(), x);
        let mut tape = Tape::inference();
        let x = tape.constant(t(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(tape.dropout(x).unwrap(), x);
    }

    #[test]
    fn dropout_reproducible_from_seed_step_and_op() {
        let run = |step| {
            let mut tape = Tape::new(TapeConfig::train(PartitionSet::empty(), 0.5, 9, step));
            let x = tape.constant(Tensor2D::filled(4, 8, 1.0)).unwrap();
            let a = tape.dropout(x).unwrap();
            let b = tape.dropout(x).unwrap();
            (tape.value(a).clone(), tape.value(b).clone())
        };
        let (a1, b1) = run(3);
        let (a2, b2) = run(3);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
        assert_ne!(run(4).0, a1);
        assert!(a1.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn unused_trainable_param_gets_exact_zero() {
        let mut store = ParamStore::new();
        let used = store.add("used", Partition::Head, t(1, 2, &[1.0, 2.0]));
        let unused = store.add("unused", Partition::Head, t(1, 2, &[5.0, 6.0]));
        let mut tape = Tape::new(TapeConfig::train(PartitionSet::all(), 0.0, 0, 0));
        let u = tape.param(&store, used).unwrap();
        let _ = tape.param(&store, unused).unwrap();
        let loss = tape.weighted_row_sq_dist(u, Tensor2D::zeros(1, 2), vec![1.0]).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g.get(used).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_partition_produces_no_param_leaf() {
        let mut store = ParamStore::new();
        let a = store.add("a", Partition::Backbone, t(1, 1, &[1.0]));
        let b = store.add("b", Partition::Head, t(1, 1, &[1.0]));
        let mut tape = Tape::new(TapeConfig::train(PartitionSet::of(&[Partition::Head]), 0.0, 0, 0));
        let va = tape.param(&store, a).unwrap();
        let vb = tape.param(&store, b).unwrap();
        assert!(!tape.needs_grad(va));
        assert!(tape.needs_grad(vb));
        assert_eq!(tape.param_leaves(), &[(b, Partition::Head)]);
        let s = tape.add(va, vb).unwrap();
        let loss = tape.weighted_row_sq_dist(s, Tensor2D::zeros(1, 1), vec![1.0]).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().item(), 4.0);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_vocab() {
        for eps in [0.0, 0.1, 0.5] {
            let mut tape = Tape::inference();
            let l = tape.constant(Tensor2D::zeros(3, 4)).unwrap();
            let loss = tape.label_smoothed_ce(l, &[Some(0), Some(3), None], eps).unwrap();
            assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn peaked_logit_cross_entropy() {
        // p(true) = 0.9 over V = 3: logits ln(0.9), ln(0.05), ln(0.05).
        let mut tape = Tape::inference();
        let l = tape.constant(t(1, 3, &[0.9f64.ln(), 0.05f64.ln(), 0.05f64.ln()])).unwrap();
        let loss = tape.label_smoothed_ce(l, &[Some(0)], 0.0).unwrap();
        assert!((tape.value(loss).item() + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_requires_unmasked_position() {
        let mut tape = Tape::inference();
        let l = tape.constant(Tensor2D::zeros(2, 4)).unwrap();
        assert!(tape.label_smoothed_ce(l, &[None, None], 0.1).is_err());
    }
}
