//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries probed per parameter tensor; larger tensors are sampled.
    pub max_entries: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries: 12,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Compare the analytic gradient returned by `loss_fn` with central
/// differences for every parameter that received a gradient.
///
/// `loss_fn(store, want_grad)` must be deterministic; it is evaluated twice
/// at the base point and a differing value is reported as an error.
pub fn grad_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Gradients>)>,
{
    grad_check_with(store, |s| s, opts, loss_fn)
}

/// `grad_check` over any value that owns a parameter store, such as a
/// whole model.
pub fn grad_check_with<T, F>(
    target: &mut T,
    store_of: fn(&mut T) -> &mut ParamStore,
    opts: &GradCheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&T, bool) -> Result<(f64, Option<Gradients>)>,
{
    let (base, grads) = loss_fn(target, true)?;
    let grads = grads.ok_or_else(|| Error::invalid("grad_check", "loss_fn returned no gradients"))?;
    let (again, _) = loss_fn(target, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::new();
    for (id, g) in grads.iter() {
        let g = g.clone();
        let n = g.len();
        let entries: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_rel: f64 = 0.0;
        for &i in &entries {
            let orig = store_of(target).value(id).data()[i];
            store_of(target).value_mut(id).data_mut()[i] = orig + opts.eps;
            let (plus, _) = loss_fn(target, false)?;
            store_of(target).value_mut(id).data_mut()[i] = orig - opts.eps;
            let (minus, _) = loss_fn(target, false)?;
            store_of(target).value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = g.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
        report.push(ParamCheck {
            id,
            name: store_of(target).get(id).name.clone(),
            max_rel_err: max_rel,
            max_abs_analytic: g.data().iter().fold(0.0, |m, v| m.max(v.abs())),
            checked: entries.len(),
        });
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Partition, PartitionSet};
    use crate::tape::{Tape, TapeConfig};
    use crate::tensor::Tensor2D;

    #[test]
    fn linear_map_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Partition::Head,
            Tensor2D::from_vec(2, 2, vec![0.3, -0.2, 0.5, 0.1]).unwrap(),
        );
        let x = Tensor2D::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let c = Tensor2D::from_vec(2, 1, vec![0.7, -1.3]).unwrap();
        let report = grad_check(&mut store, &GradCheckOptions::default(), |s, want| {
            let mut tape = Tape::new(TapeConfig::train(PartitionSet::all(), 0.0, 0, 0));
            let xv = tape.constant(x.clone())?;
            let wv = tape.param(s, w)?;
            let cv = tape.constant(c.clone())?;
            let h = tape.matmul(xv, wv)?;
            let loss = tape.matmul(h, cv)?;
            let val = tape.value(loss).item();
            Ok((val, want.then(|| tape.backward(loss, s)).transpose()?))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-9, "{report:?}");
    }

    #[test]
    fn nondeterminism_detected() {
        let mut store = ParamStore::new();
        store.add("w", Partition::Head, Tensor2D::scalar(1.0));
        let mut calls = 0.0;
        let err = grad_check(&mut store, &GradCheckOptions::default(), |s, _| {
            calls += 1.0;
            Ok((calls, Some(Gradients::new(s.len()))))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
