//! Softmax, cross-entropy and entropy with their gradients w.r.t. logits.

use crate::num::Scalar;

const LOG_FLOOR: f64 = 1e-12;

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, x| m.max(*x));
    let exps: Vec<T> = logits.iter().map(|x| (*x - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |s, x| s + *x);
    exps.into_iter().map(|x| x / sum).collect()
}

/// Softmax restricted to entries where `mask` is true; masked entries get 0.
///
/// Returns `None` when nothing is unmasked.
pub fn masked_softmax<T: Scalar>(logits: &[T], mask: &[bool]) -> Option<Vec<T>> {
    debug_assert_eq!(logits.len(), mask.len());
    let max = logits.iter().zip(mask).filter(|(_, m)| **m).fold(T::neg_infinity(), |m, (x, _)| m.max(*x));
    if max == T::neg_infinity() {
        return None;
    }
    let exps: Vec<T> = logits.iter().zip(mask).map(|(x, m)| if *m { (*x - max).exp() } else { T::zero() }).collect();
    let sum = exps.iter().fold(T::zero(), |s, x| s + *x);
    Some(exps.into_iter().map(|x| x / sum).collect())
}

/// `−ln p[target]`, with `p` floored at 1e-12.
pub fn cross_entropy<T: Scalar>(p: &[T], target: usize) -> T {
    -p[target].max(T::of(LOG_FLOOR)).ln()
}

/// Gradient of softmax cross-entropy w.r.t. the logits: `p − onehot(target)`.
pub fn cross_entropy_grad<T: Scalar>(p: &[T], target: usize, out: &mut [T]) {
    out.copy_from_slice(p);
    out[target] -= T::one();
}

/// Gradient of `ln p[action]` w.r.t. the logits: `onehot(action) − p`.
pub fn log_prob_grad<T: Scalar>(p: &[T], action: usize, out: &mut [T]) {
    out.iter_mut().zip(p).for_each(|(o, x)| *o = -*x);
    out[action] += T::one();
}

/// Shannon entropy `−Σ p ln p` in nats.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter().filter(|x| **x > T::zero()).fold(T::zero(), |h, x| h - *x * x.ln())
}

/// Gradient of the entropy w.r.t. the logits: `−p_j (ln p_j + H)`.
pub fn entropy_grad<T: Scalar>(p: &[T], out: &mut [T]) {
    let h = entropy(p);
    out.iter_mut().zip(p).for_each(|(o, x)| {
        *o = if *x > T::zero() { -*x * (x.ln() + h) } else { T::zero() };
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0f64; 7]);
        assert!(p.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.25f64; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy(&[0.0f64, 1.0, 0.0], 1), 0.0);
        assert!((cross_entropy(&[0.5f64, 0.5], 0) - 2f64.ln()).abs() < 1e-12);
        // floored, not infinite
        assert!((cross_entropy(&[1.0f64, 0.0], 1) - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let p = softmax(&[0.3f64, -1.0, 2.0]);
        let mut g = [0.0; 3];
        cross_entropy_grad(&p, 2, &mut g);
        assert_eq!(g, [p[0], p[1], p[2] - 1.0]);
    }

    #[test]
    fn entropy_extremes() {
        let n = 9;
        let uniform = vec![1.0f64 / n as f64; n];
        assert!((entropy(&uniform) - (n as f64).ln()).abs() < 1e-12);
        let mut onehot = vec![0.0f64; n];
        onehot[3] = 1.0;
        assert_eq!(entropy(&onehot), 0.0);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let p = masked_softmax(&[5.0f64, 1.0, 1.0], &[false, true, true]).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.5).abs() < 1e-15);
        assert!(masked_softmax(&[1.0f64], &[false]).is_none());
    }

    fn finite_diff(f: impl Fn(&[f64]) -> f64, z: &[f64], j: usize) -> f64 {
        let h = 1e-6;
        let mut a = z.to_vec();
        let mut b = z.to_vec();
        a[j] += h;
        b[j] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(z in proptest::collection::vec(-5.0f64..5.0, 2..10), c in -10.0f64..10.0) {
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_bounded_by_log_n(z in proptest::collection::vec(-5.0f64..5.0, 2..12)) {
            let h = entropy(&softmax(&z));
            prop_assert!(h >= 0.0 && h <= (z.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn entropy_gradient_matches_finite_differences(z in proptest::collection::vec(-3.0f64..3.0, 2..8)) {
            let p = softmax(&z);
            let mut g = vec![0.0; z.len()];
            entropy_grad(&p, &mut g);
            for j in 0..z.len() {
                let fd = finite_diff(|x| entropy(&softmax(x)), &z, j);
                prop_assert!((fd - g[j]).abs() < 1e-6, "{} vs {}", fd, g[j]);
            }
        }

        #[test]
        fn log_prob_gradient_matches_finite_differences(z in proptest::collection::vec(-3.0f64..3.0, 2..8), a in 0usize..8) {
            let a = a % z.len();
            let p = softmax(&z);
            let mut g = vec![0.0; z.len()];
            log_prob_grad(&p, a, &mut g);
            for j in 0..z.len() {
                let fd = finite_diff(|x| softmax(x)[a].ln(), &z, j);
                prop_assert!((fd - g[j]).abs() < 1e-6);
            }
        }
    }
}
