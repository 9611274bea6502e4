use proptest::prelude::*;

use sbp::loss::{combined_loss, generalized_cross_entropy, BatchLabels, LossRatio, Reduction};
use sbp::{LabelTree, Tensor};

fn tree() -> LabelTree {
    LabelTree::build(&[("a", "a0"), ("a", "a1"), ("a", "a2"), ("b", "b0"), ("b", "b1"), ("c", "c0")]).unwrap()
}

/// `-log softmax(z)[y]` written out directly.
fn ce_oracle(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    -((z[y] - m).exp() / s).ln()
}

fn first_max(z: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..z.len() {
        if z[i] > z[best] {
            best = i;
        }
    }
    best
}

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 6), n),
            prop::collection::vec(0usize..6, n),
        )
    })
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(1000)
    })]

    #[test]
    fn gce_with_b_one_is_summed_cross_entropy((rows, fine) in batch()) {
        let t = tree();
        let labels = BatchLabels::from_fine(fine.clone(), &t).unwrap();
        let out = generalized_cross_entropy(&tensor(&rows), &labels, &t, 1.0, Reduction::Sum).unwrap();
        let expect: f64 = rows.iter().zip(&fine).map(|(z, &y)| ce_oracle(z, y)).sum();
        prop_assert!((out.loss - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn violating_samples_weigh_b_times((rows, fine) in batch(), b in 1.0f64..5.0) {
        let t = tree();
        let labels = BatchLabels::from_fine(fine.clone(), &t).unwrap();
        let out = generalized_cross_entropy(&tensor(&rows), &labels, &t, b, Reduction::Sum).unwrap();
        let expect: f64 = rows
            .iter()
            .zip(&fine)
            .map(|(z, &y)| {
                let violates = t.parent(first_max(z)).unwrap() != t.parent(y).unwrap();
                if violates { b * ce_oracle(z, y) } else { ce_oracle(z, y) }
            })
            .sum();
        prop_assert!((out.loss - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn all_correct_batch_ignores_b((rows, fine) in batch(), b in 1.0f64..10.0) {
        let t = tree();
        // Force every prediction to be right.
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .zip(&fine)
            .map(|(mut z, &y)| {
                z[y] = z.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
                z
            })
            .collect();
        let labels = BatchLabels::from_fine(fine, &t).unwrap();
        let z = tensor(&rows);
        let plain = generalized_cross_entropy(&z, &labels, &t, 1.0, Reduction::Mean).unwrap();
        let penalized = generalized_cross_entropy(&z, &labels, &t, b, Reduction::Mean).unwrap();
        prop_assert_eq!(penalized.mask.violations(), 0);
        prop_assert!((plain.loss - penalized.loss).abs() <= 1e-12);
    }

    #[test]
    fn combined_loss_ignores_ratio_scale(lc in 0.0f64..20.0, lf in 0.0f64..20.0, k in 0.01f64..1000.0) {
        let a = combined_loss(lc, lf, LossRatio::new(7.0, 3.0).unwrap()).unwrap();
        let b = combined_loss(lc, lf, LossRatio::new(7.0 * k, 3.0 * k).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}

#[test]
fn violating_sample_contribution_is_b_times() {
    let t = tree();
    // True class a0 (coarse a), prediction b0 (coarse b).
    let z = Tensor::from_rows(&[vec![0.5, 0.1, 0.0, 2.0, 0.3, -1.0]]).unwrap();
    let labels = BatchLabels::from_fine(vec![0], &t).unwrap();
    let base = ce_oracle(z.row(0), 0);
    for b in [1.0, 1.5, 2.0, 3.7] {
        let out = generalized_cross_entropy(&z, &labels, &t, b, Reduction::Sum).unwrap();
        assert!((out.loss - b * base).abs() <= 1e-12, "b={b}");
        assert_eq!(out.mask.alpha, vec![b]);
    }
}

#[test]
fn intra_coarse_error_is_not_penalized() {
    let t = tree();
    // True a0, predicted a2: wrong but under the right parent.
    let z = Tensor::from_rows(&[vec![0.5, 0.1, 2.0, 0.0, 0.3, -1.0]]).unwrap();
    let labels = BatchLabels::from_fine(vec![0], &t).unwrap();
    let out = generalized_cross_entropy(&z, &labels, &t, 3.0, Reduction::Sum).unwrap();
    assert!((out.loss - ce_oracle(z.row(0), 0)).abs() <= 1e-12);
}

#[test]
fn seven_to_three_and_seventy_to_thirty() {
    let r73 = LossRatio::new(7.0, 3.0).unwrap();
    let r7030: LossRatio = "70:30".parse().unwrap();
    for (lc, lf) in [(0.0, 1.0), (1.0, 0.0), (2.5, 0.75), (1e-3, 40.0)] {
        let a = combined_loss(lc, lf, r73).unwrap();
        let b = combined_loss(lc, lf, r7030).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
    assert!((combined_loss(0.0, 1.0, r73).unwrap() - 0.3).abs() <= 1e-12);
    assert!((combined_loss(1.0, 0.0, r73).unwrap() - 0.7).abs() <= 1e-12);
}
