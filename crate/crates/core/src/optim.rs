//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore, PartitionSet};
use crate::tensor::Tensor2D;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;
/// Global gradient-norm clip applied before every update.
pub const CLIP_NORM: f64 = 1.0;

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if warmup == 0 {
        return Err(Error::invalid("lr_at", "warmup must be positive"));
    }
    if step == 0 {
        return Err(Error::invalid("lr_at", "step counts from 1"));
    }
    let s = step as f64;
    let decay = s.powf(-0.5);
    let ramp = s * (warmup as f64).powf(-1.5);
    Ok((d_model as f64).powf(-0.5) * decay.min(ramp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub warmup: u64,
    pub d_model: usize,
    pub first: Vec<Option<Tensor2D>>,
    pub second: Vec<Option<Tensor2D>>,
}

impl OptimizerState {
    pub fn new(n_params: usize, d_model: usize, warmup: u64) -> Self {
        Self {
            step: 0,
            warmup,
            d_model,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    /// Learning rate the next call to [`adam_step`] will use, before the
    /// caller's multiplier.
    pub fn next_lr(&self) -> Result<f64> {
        lr_at(self.step + 1, self.d_model, self.warmup)
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient
/// and whose partition is not in `frozen`.
pub fn adam_step(
    state: &mut OptimizerState,
    store: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
    frozen: PartitionSet,
) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                state.first.len(),
                store.len()
            ),
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for (id, g) in grads.iter() {
        if frozen.contains(store.get(id).partition) {
            continue;
        }
        g.ensure_finite("adam_step")?;
        let value = store.value_mut(id);
        value.ensure_shape("adam_step", g)?;
        let m = state.first[id.0].get_or_insert_with(|| Tensor2D::zeros(g.rows(), g.cols()));
        m.ensure_shape("adam_step", g)?;
        let v = state.second[id.0].get_or_insert_with(|| Tensor2D::zeros(g.rows(), g.cols()));
        v.ensure_shape("adam_step", g)?;
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (p, gi)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
            md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
            vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamId, Partition};

    #[test]
    fn knee_branches_agree() {
        let w = 4000;
        let at = lr_at(w, 512, w).unwrap();
        let expect = (w as f64).powf(-0.5) * 512f64.powf(-0.5);
        assert!((at - expect).abs() < 1e-18);
        assert!((at - 6.987_712_429_686_844e-4).abs() < 1e-12);
    }

    #[test]
    fn early_steps_ramp_linearly() {
        let a = lr_at(1, 64, 400).unwrap();
        let b = lr_at(2, 64, 400).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-18);
        assert_eq!(a, 64f64.powf(-0.5) * 400f64.powf(-1.5));
    }

    #[test]
    fn continuous_at_warmup() {
        let w = 400;
        let left = lr_at(w - 1, 64, w).unwrap();
        let at = lr_at(w, 64, w).unwrap();
        let right = lr_at(w + 1, 64, w).unwrap();
        assert!((at - left).abs() < at * 3.0 / w as f64);
        assert!((at - right).abs() < at * 3.0 / w as f64);
    }

    #[test]
    fn zero_warmup_rejected() {
        assert!(lr_at(1, 64, 0).is_err());
    }

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Partition::Head, Tensor2D::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = one_param(1.5);
        let mut st = OptimizerState::new(1, 8, 10);
        let mut g = Gradients::new(1);
        g.set(ParamId(0), Tensor2D::scalar(0.0));
        adam_step(&mut st, &mut store, &g, 0.1, PartitionSet::empty()).unwrap();
        assert_eq!(store.value(ParamId(0)).item(), 1.5);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let (theta, grad, lr) = (0.7, 0.3, 0.01);
        let mut store = one_param(theta);
        let mut st = OptimizerState::new(1, 8, 10);
        let mut g = Gradients::new(1);
        g.set(ParamId(0), Tensor2D::scalar(grad));
        adam_step(&mut st, &mut store, &g, lr, PartitionSet::empty()).unwrap();
        // Hand evaluation: m = 0.1 g, v = 0.02 g², m̂ = g, v̂ = g².
        let m = (1.0 - 0.9) * grad;
        let v = (1.0 - 0.98) * grad * grad;
        let step = lr * (m / 0.1) / ((v / 0.02f64).sqrt() + 1e-9);
        assert!((store.value(ParamId(0)).item() - (theta - step)).abs() < 1e-15);
        // A constant gradient moves the parameter by ≈ lr against its sign.
        assert!((step - lr).abs() < 1e-9);
    }

    #[test]
    fn frozen_everything_is_identity() {
        let mut store = one_param(2.0);
        let before = store.clone();
        let mut st = OptimizerState::new(1, 8, 10);
        let mut g = Gradients::new(1);
        g.set(ParamId(0), Tensor2D::scalar(5.0));
        adam_step(&mut st, &mut store, &g, 0.1, PartitionSet::all()).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = one_param(2.0);
        let mut st = OptimizerState::new(1, 8, 10);
        let mut g = Gradients::new(1);
        g.set(ParamId(0), Tensor2D::zeros(1, 2));
        assert!(adam_step(&mut st, &mut store, &g, 0.1, PartitionSet::empty()).is_err());
    }
}
