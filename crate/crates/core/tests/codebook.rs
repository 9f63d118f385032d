//! Quantizer and EMA maintenance against brute-force and scalar oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tit_core::codebook::CodebookState;
use tit_core::tensor::Tensor2D;

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor2D {
    let n = Normal::new(0.0, std).unwrap();
    Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
}

fn brute_nearest(codes: &Tensor2D, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..codes.rows() {
        let d: f64 = codes.row(k).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

#[test]
fn quantize_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cb = CodebookState::random(64, 16, 0.99, 2).unwrap();
    let h = gaussian(1000, 16, 0.25, &mut rng);
    let q = cb.quantize(&h).unwrap();
    for i in 0..h.rows() {
        let k = brute_nearest(cb.codes(), h.row(i));
        assert_eq!(q.indices[i], k);
        assert_eq!(q.codes.row(i), cb.codes().row(k));
    }
}

/// The EMA recurrences over explicit count and sum arrays.
struct EmaOracle {
    gamma: f64,
    n: Vec<f64>,
    m: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
}

impl EmaOracle {
    fn new(codes: &Tensor2D, gamma: f64) -> Self {
        let e: Vec<Vec<f64>> = (0..codes.rows()).map(|k| codes.row(k).to_vec()).collect();
        Self {
            gamma,
            n: vec![1.0; codes.rows()],
            m: e.clone(),
            e,
        }
    }

    fn update(&mut self, h: &Tensor2D, assign: &[usize]) {
        let g = self.gamma;
        for k in 0..self.n.len() {
            let rows: Vec<usize> = (0..h.rows()).filter(|&i| assign[i] == k).collect();
            let c = rows.len() as f64;
            self.n[k] = g * self.n[k] + (1.0 - g) * c;
            for j in 0..self.m[k].len() {
                let hk: f64 = rows.iter().map(|&i| h.get(i, j)).sum();
                self.m[k][j] = g * self.m[k][j] + (1.0 - g) * hk;
            }
            if self.n[k] > 1e-9 {
                self.e[k] = self.m[k].iter().map(|v| v / self.n[k]).collect();
            }
        }
    }
}

#[test]
fn ema_trajectories_match_oracle() {
    for trial in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let (k, d) = (8 + trial as usize * 4, 4 + trial as usize);
        let gamma = rng.random_range(0.5..0.999);
        let mut cb = CodebookState::random(k, d, gamma, trial).unwrap();
        let mut oracle = EmaOracle::new(cb.codes(), gamma);
        for _ in 0..50 {
            let rows = rng.random_range(1..40);
            let h = gaussian(rows, d, 0.5, &mut rng);
            let assign = cb.quantize(&h).unwrap().indices;
            let before: f64 = cb.counts().iter().sum();
            cb.ema_update(&h, &assign).unwrap();
            oracle.update(&h, &assign);
            let after: f64 = cb.counts().iter().sum();
            assert!((after - (gamma * before + (1.0 - gamma) * rows as f64)).abs() < 1e-10);
            for kk in 0..k {
                assert!((cb.counts()[kk] - oracle.n[kk]).abs() < 1e-10);
                for j in 0..d {
                    assert!((cb.codes().get(kk, j) - oracle.e[kk][j]).abs() < 1e-10);
                    assert!((cb.sums().get(kk, j) - oracle.m[kk][j]).abs() < 1e-10);
                }
            }
        }
    }
}

/// With one state per code per step, the printed recurrence started from
/// `n = 0` and the stabilized form reach the same fixed point. The printed
/// form first amplifies its start by `Π γ/n_t`, about e^164 at γ = 0.99,
/// so it settles far later.
#[test]
fn printed_and_stabilized_forms_share_fixed_points() {
    let gamma = 0.99;
    let target = [0.3, -0.7];
    let mut cb = CodebookState::from_codes(Tensor2D::from_rows(&[vec![1.0, 1.0]]).unwrap(), gamma).unwrap();
    let (mut n, mut e) = (0.0f64, [1.0f64, 1.0]);
    let h = Tensor2D::from_rows(&[target.to_vec()]).unwrap();
    for _ in 0..40_000 {
        cb.ema_update(&h, &[0]).unwrap();
        n = gamma * n + (1.0 - gamma);
        for j in 0..2 {
            e[j] = (gamma * e[j] + (1.0 - gamma) * target[j]) / n;
        }
    }
    for j in 0..2 {
        assert!((cb.codes().get(0, j) - target[j]).abs() < 1e-10);
        assert!((e[j] - target[j]).abs() < 1e-10);
    }
}

#[test]
fn assignment_frequencies_are_binomial() {
    let (k, d, n) = (2048, 16, 100_000);
    let cb = CodebookState::random(k, d, 0.99, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 1e-3).unwrap();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.random_range(0..k);
        data.extend(cb.codes().row(c).iter().map(|v| v + noise.sample(&mut rng)));
    }
    let h = Tensor2D::from_vec(n, d, data).unwrap();
    let q = cb.quantize(&h).unwrap();
    let mut counts = vec![0usize; k];
    q.indices.iter().for_each(|&i| counts[i] += 1);
    let p = 1.0 / k as f64;
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (code, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() < 5.0 * sigma, "code {code}: {c} vs {mean} ± {sigma}");
    }
}

#[test]
fn ema_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cb = CodebookState::random(16, 8, 0.99, 4).unwrap();
        for _ in 0..20 {
            let h = gaussian(30, 8, 0.4, &mut rng);
            let a = cb.quantize(&h).unwrap().indices;
            cb.ema_update(&h, &a).unwrap();
        }
        cb
    };
    let (a, b) = (run(), run());
    assert_eq!(a.codes().data(), b.codes().data());
    assert_eq!(a.counts(), b.counts());
}

fn inputs(rows: usize, d: usize) -> impl Strategy<Value = Tensor2D> {
    prop::collection::vec(-2.0f64..2.0, rows * d).prop_map(move |v| Tensor2D::from_vec(rows, d, v).unwrap())
}

proptest! {
    #[test]
    fn quantizer_is_optimal(seed in 0u64..10_000, k in 1usize..64, h in inputs(12, 6)) {
        let cb = CodebookState::random(k, 6, 0.99, seed).unwrap();
        let q = cb.quantize(&h).unwrap();
        for i in 0..h.rows() {
            let dist = |kk: usize| -> f64 { cb.codes().row(kk).iter().zip(h.row(i)).map(|(a, b)| (a - b) * (a - b)).sum() };
            let chosen = dist(q.indices[i]);
            for kk in 0..k {
                prop_assert!(chosen <= dist(kk));
            }
        }
    }

    #[test]
    fn quantizer_is_permutation_equivariant(seed in 0u64..10_000, h in inputs(10, 4), perm_seed in 0u64..1000) {
        let cb = CodebookState::random(9, 4, 0.99, seed).unwrap();
        let mut order: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted = Tensor2D::from_rows(&order.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = cb.quantize(&h).unwrap().indices;
        let b = cb.quantize(&permuted).unwrap().indices;
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(b[j], a[i]);
        }
    }

    #[test]
    fn ema_conserves_mass(seed in 0u64..10_000, gamma in 0.01f64..0.999, h in inputs(15, 3)) {
        let mut cb = CodebookState::random(5, 3, gamma, seed).unwrap();
        for _ in 0..3 {
            let a = cb.quantize(&h).unwrap().indices;
            let before: f64 = cb.counts().iter().sum();
            cb.ema_update(&h, &a).unwrap();
            let after: f64 = cb.counts().iter().sum();
            prop_assert!((after - (gamma * before + (1.0 - gamma) * 15.0)).abs() < 1e-12);
            prop_assert!(cb.counts().iter().all(|&n| n >= 0.0));
        }
    }
}
