//! The multimodal codebook: `K` latent code vectors shared by text and
//! image representations.
//!
//! Codes are never gradient-updated. They follow an exponential moving
//! average of the hidden states assigned to them, stored as unnormalized
//! running sums `m_k` and counts `n_k` so that `e_k = m_k / n_k`. Starting
//! from `n_k = 1`, `m_k = e_k⁰` keeps the first update well defined.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2D;

/// Counts at or below this are treated as empty when renormalizing.
pub const COUNT_EPS: f64 = 1e-9;
/// EMA count below which a code is reported as dead.
pub const DEAD_CODE_COUNT: f64 = 1e-2;
pub const DEFAULT_GAMMA: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookState {
    gamma: f64,
    codes: Tensor2D,
    counts: Vec<f64>,
    sums: Tensor2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    /// `codes[i] = e[indices[i]]`.
    pub codes: Tensor2D,
    /// Euclidean distance of each input row to its code. Empty when the
    /// codes were not chosen from inputs (random sampling).
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmaStats {
    /// Mean squared distance of the update's inputs to their codes.
    pub quantization_error: f64,
    pub used_codes: usize,
    pub dead_codes: usize,
}

impl CodebookState {
    /// `K` codes drawn i.i.d. from `N(0, 1/d)`.
    pub fn random(k: usize, d: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).map_err(|e| Error::invalid("codebook", e.to_string()))?;
        let data = (0..k * d).map(|_| normal.sample(&mut rng)).collect();
        Self::from_codes(Tensor2D::from_vec(k, d, data)?, gamma)
    }

    pub fn from_codes(codes: Tensor2D, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("codebook", format!("decay {gamma} outside (0, 1)")));
        }
        codes.ensure_finite("codebook")?;
        Ok(Self {
            gamma,
            counts: vec![1.0; codes.rows()],
            sums: codes.clone(),
            codes,
        })
    }

    /// Rebuild from raw parts (checkpoint loading).
    pub fn from_parts(gamma: f64, codes: Tensor2D, counts: Vec<f64>, sums: Tensor2D) -> Result<Self> {
        codes.ensure_shape("codebook", &sums)?;
        if counts.len() != codes.rows() || counts.iter().any(|&n| !(n >= 0.0 && n.is_finite())) {
            return Err(Error::invalid("codebook", "counts must be finite, nonnegative, one per code"));
        }
        codes.ensure_finite("codebook")?;
        sums.ensure_finite("codebook")?;
        Ok(Self {
            gamma,
            codes,
            counts,
            sums,
        })
    }

    pub fn k(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    pub fn codes(&self) -> &Tensor2D {
        &self.codes
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn sums(&self) -> &Tensor2D {
        &self.sums
    }

    pub fn dead_codes(&self) -> usize {
        self.counts.iter().filter(|&&n| n < DEAD_CODE_COUNT).count()
    }

    /// Nearest code per row of `h` under L2 distance, lowest index on ties.
    pub fn quantize(&self, h: &Tensor2D) -> Result<QuantizationResult> {
        if self.k() == 0 {
            return Err(Error::invalid("quantize", "codebook is empty"));
        }
        if h.cols() != self.dim() {
            return Err(Error::Shape {
                op: "quantize",
                left: h.shape(),
                right: self.codes.shape(),
            });
        }
        let mut indices = Vec::with_capacity(h.rows());
        let mut distances = Vec::with_capacity(h.rows());
        for r in 0..h.rows() {
            let row = h.row(r);
            let mut best = (0, f64::INFINITY);
            for k in 0..self.k() {
                let d2: f64 = row.iter().zip(self.codes.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (k, d2);
                }
            }
            indices.push(best.0);
            distances.push(best.1.sqrt());
        }
        let codes = self.gather(&indices);
        Ok(QuantizationResult {
            indices,
            codes,
            distances,
        })
    }

    /// Rows `e[idx]` for each index.
    pub fn gather(&self, indices: &[usize]) -> Tensor2D {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.codes.row(i));
        }
        Tensor2D::from_vec(indices.len(), self.dim(), data).expect("gather shape")
    }

    /// Uniform i.i.d. code indices from a seeded generator.
    pub fn random_codes(&self, n: usize, seed: u64) -> Result<QuantizationResult> {
        if self.k() == 0 {
            return Err(Error::invalid("random_codes", "codebook is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.k())).collect();
        Ok(QuantizationResult {
            codes: self.gather(&indices),
            indices,
            distances: Vec::new(),
        })
    }

    /// One EMA step from rows `h` assigned to `assignments`.
    ///
    /// Codes with no assignment keep `e_k` exactly; their `n_k` and `m_k`
    /// both decay by `γ`.
    pub fn ema_update(&mut self, h: &Tensor2D, assignments: &[usize]) -> Result<EmaStats> {
        if h.cols() != self.dim() {
            return Err(Error::Shape {
                op: "ema_update",
                left: h.shape(),
                right: self.codes.shape(),
            });
        }
        if assignments.len() != h.rows() {
            return Err(Error::Shape {
                op: "ema_update",
                left: h.shape(),
                right: (assignments.len(), 1),
            });
        }
        h.ensure_finite("ema_update")?;
        let (k, d) = (self.k(), self.dim());
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::invalid("ema_update", format!("assignment {bad} >= {k} codes")));
        }
        let mut counts = vec![0usize; k];
        let mut sums = Tensor2D::zeros(k, d);
        let mut err = 0.0;
        for (r, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for ((s, x), e) in sums.row_mut(a).iter_mut().zip(h.row(r)).zip(self.codes.row(a)) {
                *s += x;
                err += (x - e) * (x - e);
            }
        }
        let g = self.gamma;
        for kk in 0..k {
            self.counts[kk] = g * self.counts[kk] + (1.0 - g) * counts[kk] as f64;
            for (m, s) in self.sums.row_mut(kk).iter_mut().zip(sums.row(kk)) {
                *m = g * *m + (1.0 - g) * s;
            }
            if counts[kk] > 0 && self.counts[kk] > COUNT_EPS {
                let n = self.counts[kk];
                let (codes, m) = (&mut self.codes, &self.sums);
                for (e, mv) in codes.row_mut(kk).iter_mut().zip(m.row(kk)) {
                    *e = mv / n;
                }
            }
        }
        Ok(EmaStats {
            quantization_error: if h.rows() > 0 { err / h.rows() as f64 } else { 0.0 },
            used_codes: counts.iter().filter(|&&c| c > 0).count(),
            dead_codes: self.dead_codes(),
        })
    }

    /// `(1/N) Σ_i e[nearest(h_i)]` as a `1 × d` row.
    pub fn pooled_quantized(&self, h: &Tensor2D) -> Result<Tensor2D> {
        if h.rows() == 0 {
            return Err(Error::invalid("pooled_quantized", "no rows to pool"));
        }
        let q = self.quantize(h)?;
        Ok(mean_rows(&q.codes))
    }

    /// Squared L2 distance between the pooled codes of `hv` and `he`.
    pub fn alignment_loss(&self, hv: &Tensor2D, he: &Tensor2D) -> Result<f64> {
        if hv.cols() != he.cols() {
            return Err(Error::Shape {
                op: "alignment_loss",
                left: hv.shape(),
                right: he.shape(),
            });
        }
        let a = self.pooled_quantized(hv)?;
        let b = self.pooled_quantized(he)?;
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
    }

    /// Mean over rows of `||h_i − e[nearest(h_i)]||²`.
    pub fn commitment_loss(&self, h: &Tensor2D) -> Result<f64> {
        if h.rows() == 0 {
            return Err(Error::invalid("commitment_loss", "no rows"));
        }
        let q = self.quantize(h)?;
        Ok(q.distances.iter().map(|d| d * d).sum::<f64>() / h.rows() as f64)
    }
}

fn mean_rows(t: &Tensor2D) -> Tensor2D {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= t.rows() as f64);
    Tensor2D::row_vector(out)
}

/// Per-segment means of the nearest codes, computed off the tape.
pub fn pooled_codes(cb: &CodebookState, h: &Tensor2D, segments: &[(usize, usize)]) -> Result<Tensor2D> {
    let q = cb.quantize(h)?;
    let mut out = Tensor2D::zeros(segments.len(), h.cols());
    for (s, &(start, len)) in segments.iter().enumerate() {
        let pooled = mean_rows(&q.codes.slice_rows(start, len));
        out.row_mut(s).copy_from_slice(pooled.data());
    }
    Ok(out)
}

/// Commitment loss on the tape: per-segment mean of `||h − sg(codes)||²`,
/// averaged over segments. Gradient reaches `h` only.
pub fn commitment_on_tape(tape: &mut Tape<'_>, h: Var, codes: Tensor2D, segments: &[(usize, usize)]) -> Result<Var> {
    let weights = segment_weights(segments, tape.value(h).rows())?;
    tape.weighted_row_sq_dist(h, codes, weights)
}

/// Alignment loss on the tape: `||mean(visual) − sg(text_pooled)||²`
/// averaged over segments, where `visual` already carries the quantized
/// (straight-through) image states.
pub fn alignment_on_tape(
    tape: &mut Tape<'_>,
    visual: Var,
    visual_segments: Rc<Vec<(usize, usize)>>,
    text_pooled: Tensor2D,
) -> Result<Var> {
    let n = visual_segments.len();
    if text_pooled.rows() != n {
        return Err(Error::Shape {
            op: "alignment_loss",
            left: (n, tape.value(visual).cols()),
            right: text_pooled.shape(),
        });
    }
    let pooled = tape.segment_mean(visual, visual_segments)?;
    tape.weighted_row_sq_dist(pooled, text_pooled, vec![1.0 / n as f64; n])
}

fn segment_weights(segments: &[(usize, usize)], rows: usize) -> Result<Vec<f64>> {
    if segments.is_empty() {
        return Err(Error::invalid("commitment_loss", "no segments"));
    }
    let mut w = vec![0.0; rows];
    let n = segments.len() as f64;
    for &(start, len) in segments {
        if len == 0 || start + len > rows {
            return Err(Error::invalid("commitment_loss", "segment outside rows"));
        }
        for x in &mut w[start..start + len] {
            *x = 1.0 / (len as f64 * n);
        }
    }
    Ok(w)
}
