//! Mini-batch first-order optimizers and a finite-difference gradient checker.
//!
//! The optimizer works on flat `f64` slices; callers register their tensors
//! in a fixed order and keep that order across steps. Module-specific
//! projections (mean-zero mixing biases, clamped Cholesky diagonals) are the
//! caller's job, applied right after `step`.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD or Adam (beta1=0.9, beta2=0.999, eps=1e-8) with bias correction.
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    step_count: u64,
    slots: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Self {
            kind,
            lr,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `tensors[i]` is updated in place from `grads[i]`.
    ///
    /// Tensors must be passed in the same order on every call; moment buffers
    /// are keyed by position. Non-finite gradients abort with
    /// [`Error::NonFiniteGradient`] before any parameter is touched.
    pub fn step(&mut self, tensors: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if tensors.len() != grads.len() {
            return Err(Error::LengthMismatch {
                left: tensors.len(),
                right: grads.len(),
            });
        }
        for (t, g) in tensors.iter().zip(grads.iter()) {
            if t.len() != g.len() {
                return Err(Error::LengthMismatch {
                    left: t.len(),
                    right: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    context: "optimizer step",
                });
            }
        }
        self.step_count += 1;
        match self.kind {
            OptimKind::Sgd => {
                for (t, g) in tensors.iter_mut().zip(grads.iter()) {
                    for (p, &gv) in t.iter_mut().zip(g.iter()) {
                        *p -= self.lr * gv;
                    }
                }
            }
            OptimKind::Adam => {
                while self.slots.len() < tensors.len() {
                    let idx = self.slots.len();
                    self.slots.push(Moments {
                        m: vec![0.0; tensors[idx].len()],
                        v: vec![0.0; tensors[idx].len()],
                    });
                }
                let t = self.step_count as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(t);
                let bias2 = 1.0 - ADAM_BETA2.powi(t);
                for ((params, grad), slot) in tensors
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.slots.iter_mut())
                {
                    if slot.m.len() != params.len() {
                        return Err(Error::LengthMismatch {
                            left: slot.m.len(),
                            right: params.len(),
                        });
                    }
                    for i in 0..params.len() {
                        let g = grad[i];
                        slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
                        slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = slot.m[i] / bias1;
                        let v_hat = slot.v[i] / bias2;
                        params[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shuffled index batches covering `0..n` exactly once; the last batch may be
/// short. One call per epoch with the caller's RNG.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Result of comparing an analytic gradient against central finite
/// differences of a loss.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / (||analytic|| + 1e-12)`.
    pub rel_err: f64,
    /// Index of the coordinate with the largest absolute disagreement.
    pub worst_index: usize,
    pub worst_abs_diff: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

/// Compare `analytic` against `(f(p+eps) - f(p-eps)) / 2eps` per coordinate.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut diff_sq = 0.0;
    let mut a_sq = 0.0;
    let mut n_sq = 0.0;
    let mut worst_index = 0;
    let mut worst_abs_diff = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p);
        p[i] = orig - eps;
        let down = f(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let d = (analytic[i] - numeric).abs();
        if d > worst_abs_diff {
            worst_abs_diff = d;
            worst_index = i;
        }
        diff_sq += d * d;
        a_sq += analytic[i] * analytic[i];
        n_sq += numeric * numeric;
    }
    GradCheckReport {
        rel_err: diff_sq.sqrt() / (a_sq.sqrt() + 1e-12),
        worst_index,
        worst_abs_diff,
        analytic_norm: a_sq.sqrt(),
        numeric_norm: n_sq.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sgd_step_matches_definition() {
        let mut opt = Optimizer::new(OptimKind::Sgd, 0.1);
        let mut p = [1.0];
        opt.step(&mut [&mut p], &[&[2.0]]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        for kind in [OptimKind::Sgd, OptimKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.5);
            let mut p = [3.25, -1.5];
            opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
            assert_eq!(p, [3.25, -1.5]);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // First bias-corrected step is lr * g / (|g| + eps); the eps in the
        // denominator bounds the deviation from lr*sign(g) by lr*eps/|g|.
        let lr = 0.01;
        for &g in &[1e-2, 0.1, 1.0, -5.0, -1e-2] {
            let mut opt = Optimizer::new(OptimKind::Adam, lr);
            let mut p = [0.0];
            opt.step(&mut [&mut p], &[&[g]]).unwrap();
            let delta = p[0];
            assert!(
                (delta + lr * g.signum()).abs() <= lr * 1e-6,
                "g={g}: delta={delta}"
            );
        }
        // At |g| = 1e-3 the deviation is lr*eps/(|g|+eps) ~= lr*1e-5.
        let mut opt = Optimizer::new(OptimKind::Adam, lr);
        let mut p = [0.0];
        opt.step(&mut [&mut p], &[&[1e-3]]).unwrap();
        assert!((p[0] + lr).abs() <= lr * 1.1e-5);
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        let lr = 0.3;
        let g = 0.1;
        let run = |grad: f64| {
            let mut opt = Optimizer::new(OptimKind::Adam, lr);
            let mut p = [0.0];
            opt.step(&mut [&mut p], &[&[grad]]).unwrap();
            p[0]
        };
        let a = run(g);
        let b = run(10.0 * g);
        assert!((a - b).abs() / a.abs() <= 1e-6);
    }

    #[test]
    fn non_finite_grad_is_an_error() {
        let mut opt = Optimizer::new(OptimKind::Adam, 0.1);
        let mut p = [1.0];
        let err = opt.step(&mut [&mut p], &[&[f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn finite_inputs_never_produce_non_finite_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut opt = Optimizer::new(OptimKind::Adam, 0.9);
        let mut p = vec![0.0; 16];
        for _ in 0..200 {
            let g: Vec<f64> =
                (0..16).map(|_| rand::Rng::gen_range(&mut rng, -1e6..1e6)).collect();
            opt.step(&mut [&mut p], &[&g]).unwrap();
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn minibatches_partition_all_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = minibatches(5, 2, &mut rng);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn minibatches_deterministic_under_seed() {
        let a = minibatches(100, 7, &mut ChaCha8Rng::seed_from_u64(42));
        let b = minibatches(100, 7, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn minibatch_count_for_paper_batch_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = minibatches(1000, 32, &mut rng);
        assert_eq!(batches.len(), 32); // 31 full + one of 8
        assert_eq!(batches.last().unwrap().len(), 8);
    }

    #[test]
    fn grad_check_exact_on_quadratic() {
        let p = [0.7, -1.3, 2.2];
        let analytic: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let report = grad_check(
            |q| q.iter().map(|v| v * v).sum(),
            &p,
            &analytic,
            1e-5,
        );
        assert!(report.rel_err <= 1e-9, "rel_err={}", report.rel_err);
    }

    #[test]
    fn grad_check_flags_doubled_gradient() {
        let p = [0.7, -1.3, 2.2];
        let doubled: Vec<f64> = p.iter().map(|v| 4.0 * v).collect();
        let report = grad_check(
            |q| q.iter().map(|v| v * v).sum(),
            &p,
            &doubled,
            1e-5,
        );
        assert!((report.rel_err - 0.5).abs() < 1e-6, "rel_err={}", report.rel_err);
    }
}
