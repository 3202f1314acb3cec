//! Training objectives and their analytic gradients.
//!
//! Classification treats each class as an independent sigmoid (one-vs-rest
//! binary cross-entropy summed over classes). Distillation applies the same
//! form with the previous model's sigmoided scores as soft targets over the
//! old-class prefix. Feature drift is penalized as 1 - cos between current
//! and previous descriptors. Everything works on raw logits through
//! numerically stable forms; nothing exponentiates a positive score.

use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array1, ArrayView1};

/// Logistic function, stable on both tails.
pub fn sigmoid<F: Real>(s: F) -> F {
    if s >= F::zero() {
        F::one() / (F::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (F::one() + e)
    }
}

/// Binary cross-entropy of a logit against a target in [0, 1]:
/// max(s, 0) - s*y + ln(1 + exp(-|s|)).
pub fn bce_with_logits<F: Real>(s: F, y: F) -> F {
    s.max(F::zero()) - s * y + (-s.abs()).exp().ln_1p()
}

/// Multi-label classification loss: sum of per-class BCE against a 0/1
/// target vector.
pub fn loss_ce<F: Real>(scores: ArrayView1<F>, target: ArrayView1<F>) -> Result<F> {
    if scores.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} scores against {} targets",
            scores.len(),
            target.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(target.iter())
        .map(|(&s, &y)| bce_with_logits(s, y))
        .sum())
}

/// d loss_ce / d scores = sigmoid(scores) - target.
pub fn grad_ce<F: Real>(scores: ArrayView1<F>, target: ArrayView1<F>) -> Array1<F> {
    debug_assert_eq!(scores.len(), target.len());
    Array1::from_iter(
        scores
            .iter()
            .zip(target.iter())
            .map(|(&s, &y)| sigmoid(s) - y),
    )
}

/// Distillation loss over the old-class prefix: BCE of the new logits
/// against the previous model's sigmoided scores.
pub fn loss_kd<F: Real>(new_prefix: ArrayView1<F>, old: ArrayView1<F>) -> Result<F> {
    if new_prefix.len() != old.len() {
        return Err(Error::Dimension(format!(
            "distillation prefix of {} scores against {} reference scores",
            new_prefix.len(),
            old.len()
        )));
    }
    Ok(new_prefix
        .iter()
        .zip(old.iter())
        .map(|(&s, &o)| bce_with_logits(s, sigmoid(o)))
        .sum())
}

/// d loss_kd / d new_prefix = sigmoid(new) - sigmoid(old).
pub fn grad_kd<F: Real>(new_prefix: ArrayView1<F>, old: ArrayView1<F>) -> Array1<F> {
    debug_assert_eq!(new_prefix.len(), old.len());
    Array1::from_iter(
        new_prefix
            .iter()
            .zip(old.iter())
            .map(|(&s, &o)| sigmoid(s) - sigmoid(o)),
    )
}

/// Guarded cosine similarity: (u.v) / ((||u|| + eps)(||v|| + eps)).
pub fn cosine<F: Real>(u: ArrayView1<F>, v: ArrayView1<F>) -> F {
    let dot: F = u.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
    let nu: F = u.iter().map(|&a| a * a).sum::<F>().sqrt();
    let nv: F = v.iter().map(|&b| b * b).sum::<F>().sqrt();
    dot / ((nu + F::norm_eps()) * (nv + F::norm_eps()))
}

/// Feature-drift loss: 1 - cos(current, previous).
pub fn loss_fd<F: Real>(current: ArrayView1<F>, previous: ArrayView1<F>) -> Result<F> {
    if current.len() != previous.len() {
        return Err(Error::Dimension(format!(
            "feature-drift pair of lengths {} and {}",
            current.len(),
            previous.len()
        )));
    }
    Ok(F::one() - cosine(current, previous))
}

/// d loss_fd / d current. With A = 1/(||u||+eps), B = 1/(||v||+eps) and
/// c = (u.v) A B: gradient = A (c * u/||u|| - B v).
pub fn grad_fd_current<F: Real>(current: ArrayView1<F>, previous: ArrayView1<F>) -> Array1<F> {
    debug_assert_eq!(current.len(), previous.len());
    let dot: F = current
        .iter()
        .zip(previous.iter())
        .map(|(&a, &b)| a * b)
        .sum();
    let nu: F = current.iter().map(|&a| a * a).sum::<F>().sqrt();
    let nv: F = previous.iter().map(|&b| b * b).sum::<F>().sqrt();
    let a = F::one() / (nu + F::norm_eps());
    let b = F::one() / (nv + F::norm_eps());
    let c = dot * a * b;
    let inv_nu = if nu > F::zero() { F::one() / nu } else { F::zero() };
    Array1::from_iter(
        current
            .iter()
            .zip(previous.iter())
            .map(|(&u, &v)| a * (c * u * inv_nu - b * v)),
    )
}

/// Scalar weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Distillation weight.
    pub lambda: f64,
    /// Feature-drift weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.05,
        }
    }
}

/// ce + lambda * kd + gamma * fd. Zero weights contribute exactly nothing:
/// the term is skipped rather than multiplied.
pub fn combine_losses<F: Real>(ce: F, kd: F, fd: F, weights: &LossWeights) -> F {
    let mut total = ce;
    if weights.lambda != 0.0 {
        total = total + F::from_f64(weights.lambda) * kd;
    }
    if weights.gamma != 0.0 {
        total = total + F::from_f64(weights.gamma) * fd;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn fd_grad_check(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>, analytic: &Array1<f64>) {
        let eps = 1e-7;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let up = f(&xp);
            xp[i] -= 2.0 * eps;
            let dn = f(&xp);
            let fd = (up - dn) / (2.0 * eps);
            assert!(
                (fd - analytic[i]).abs() < 1e-6,
                "component {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn ce_at_zero_scores_is_k_ln2() {
        let scores = arr1(&[0.0f64; 5]);
        let target = arr1(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        let l = loss_ce(scores.view(), target.view()).unwrap();
        assert!((l - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_is_stable_at_extreme_logits() {
        let scores = arr1(&[1000.0f64, -1000.0]);
        let target = arr1(&[1.0, 0.0]);
        let l = loss_ce(scores.view(), target.view()).unwrap();
        assert!(l.is_finite());
        assert!(l < 1e-12);
        let wrong = arr1(&[0.0, 1.0]);
        let l2 = loss_ce(scores.view(), wrong.view()).unwrap();
        assert!(l2.is_finite());
        assert!((l2 - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let scores = arr1(&[0.3f64, -1.2, 2.0, 0.0]);
        let target = arr1(&[0.0, 1.0, 0.0, 1.0]);
        let g = grad_ce(scores.view(), target.view());
        fd_grad_check(
            |s| loss_ce(s.view(), target.view()).unwrap(),
            &scores,
            &g,
        );
    }

    #[test]
    fn kd_at_equal_logits_is_soft_target_entropy() {
        let s = arr1(&[0.7f64, -2.0, 0.0]);
        let l = loss_kd(s.view(), s.view()).unwrap();
        let entropy: f64 = s
            .iter()
            .map(|&v| {
                let p = sigmoid(v);
                -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
            })
            .sum();
        assert!((l - entropy).abs() < 1e-12);
        // and the gradient there is zero
        let g = grad_kd(s.view(), s.view());
        assert!(g.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let new = arr1(&[0.4f64, -0.8, 1.5]);
        let old = arr1(&[-0.2, 0.9, 1.5]);
        let g = grad_kd(new.view(), old.view());
        fd_grad_check(|s| loss_kd(s.view(), old.view()).unwrap(), &new, &g);
    }

    #[test]
    fn kd_length_mismatch_is_dimension_error() {
        let new = arr1(&[0.0f64, 1.0]);
        let old = arr1(&[0.0f64]);
        assert!(matches!(
            loss_kd(new.view(), old.view()).unwrap_err(),
            Error::Dimension(_)
        ));
    }

    #[test]
    fn fd_identities() {
        let v = arr1(&[0.6f64, -0.8, 0.0]);
        assert!(loss_fd(v.view(), v.view()).unwrap().abs() < 1e-9);
        let neg = v.map(|x| -x);
        assert!((loss_fd(v.view(), neg.view()).unwrap() - 2.0).abs() < 1e-9);
        let orth = arr1(&[0.8f64, 0.6, 0.0]);
        assert!((loss_fd(v.view(), orth.view()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fd_is_scale_invariant() {
        let u = arr1(&[0.3f64, 1.0, -0.4]);
        let v = arr1(&[-0.1, 0.7, 0.2]);
        let l1 = loss_fd(u.view(), v.view()).unwrap();
        let l2 = loss_fd(u.map(|x| x * 7.0).view(), v.map(|x| x * 0.01).view()).unwrap();
        assert!((l1 - l2).abs() < 1e-7);
    }

    #[test]
    fn fd_gradient_matches_finite_differences() {
        let u = arr1(&[0.9f64, -0.3, 0.5, 0.1]);
        let v = arr1(&[0.2, 0.6, -0.4, 0.8]);
        let g = grad_fd_current(u.view(), v.view());
        fd_grad_check(|x| loss_fd(x.view(), v.view()).unwrap(), &u, &g);
    }

    #[test]
    fn combine_weights_terms() {
        let w = LossWeights {
            lambda: 1.0,
            gamma: 0.05,
        };
        let total = combine_losses(1.0f64, 0.5, 0.2, &w);
        assert!((total - 1.51).abs() < 1e-12);
    }

    #[test]
    fn combine_with_zero_weights_is_ce_bit_for_bit() {
        let w = LossWeights {
            lambda: 0.0,
            gamma: 0.0,
        };
        for ce in [0.0f64, 1.2345678901234567, 17.25, 1e-300] {
            let total = combine_losses(ce, 0.9, 0.4, &w);
            assert_eq!(total.to_bits(), ce.to_bits());
        }
    }
}
