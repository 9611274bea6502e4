use nalgebra::DMatrix;
use proptest::prelude::*;

use sbp::bilinear::{bilinear_pool, l2_normalize, BilinearDescriptor};
use sbp::loss::softmax;
use sbp::Tensor;

/// Feature maps `[D, H, W]` with D ≤ 16; `relu` zeroes negative entries the
/// way a trunk output would.
fn fmap(max_d: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_d, 1usize..=4, 1usize..=4, any::<bool>()).prop_flat_map(|(d, h, w, relu)| {
        prop::collection::vec(-3.0f64..3.0, d * h * w).prop_map(move |mut v| {
            if relu {
                v.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            Tensor::new(vec![d, h, w], v).unwrap()
        })
    })
}

fn cases() -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(1000)
    }
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn gram_is_symmetric(x in fmap(16)) {
        let g = bilinear_pool(&x).unwrap();
        let d = g.shape()[0];
        for i in 0..d {
            for j in 0..d {
                prop_assert!((g.get2(i, j) - g.get2(j, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gram_is_positive_semidefinite(x in fmap(16)) {
        let g = bilinear_pool(&x).unwrap();
        let d = g.shape()[0];
        let m = DMatrix::from_row_slice(d, d, g.data());
        let min = m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-8, "min eigenvalue {min}");
    }

    #[test]
    fn pooling_scales_by_alpha_squared_exactly_for_powers_of_two(x in fmap(8), k in -6i32..=6) {
        let alpha = 2f64.powi(k);
        let lhs = bilinear_pool(&x.scale(alpha)).unwrap();
        let rhs = bilinear_pool(&x).unwrap().scale(alpha * alpha);
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn pooling_scales_by_alpha_squared(x in fmap(8), alpha in -10.0f64..10.0) {
        let lhs = bilinear_pool(&x.scale(alpha)).unwrap();
        let rhs = bilinear_pool(&x).unwrap().scale(alpha * alpha);
        // Rounding is relative to the sum of absolute products, not the entry.
        let magnitude = bilinear_pool(&x.map(f64::abs)).unwrap().scale(alpha * alpha);
        for ((a, b), m) in lhs.data().iter().zip(rhs.data()).zip(magnitude.data()) {
            prop_assert!((a - b).abs() <= 1e-13 * m);
        }
    }

    #[test]
    fn descriptor_norm_is_zero_or_one(x in fmap(16), zero in any::<bool>()) {
        let x = if zero { x.scale(0.0) } else { x };
        let n = BilinearDescriptor::compute(&x).unwrap().normalized.norm2();
        prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6, "norm {n}");
    }

    #[test]
    fn l2_normalize_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let v = Tensor::from_vec(v);
        prop_assume!(v.norm2() >= 1e-6);
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(&once).unwrap();
        prop_assert!(once.max_abs_diff(&twice).unwrap() <= 1e-9);
    }

    #[test]
    fn softmax_sums_to_one_without_overflow(z in prop::collection::vec(-1000.0f64..1000.0, 1..20)) {
        let a = softmax(&z).unwrap();
        prop_assert!(a.iter().all(|p| p.is_finite() && *p >= 0.0));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn softmax_at_extreme_logits() {
    let a = softmax(&[1000.0, -1000.0, 1000.0]).unwrap();
    assert_eq!(a, vec![0.5, 0.0, 0.5]);
    let a = softmax(&[-1000.0; 4]).unwrap();
    assert!(a.iter().all(|&p| p == 0.25));
}
