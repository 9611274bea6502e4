//! Softmax cross-entropy for the coarse branch, the hierarchy-penalized
//! (generalized) cross-entropy for the fine branch, and their weighted sum.
//!
//! The generalized loss weights sample `i` by `α_i = b` when the argmax of its
//! fine logits falls under a different coarse class than its true coarse
//! label, and by `1` otherwise. `α` depends on the logits only through the
//! argmax, so the backward pass treats it as a constant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tree::LabelTree;

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("logits".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log Σ exp(z)`, stable.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Returns `-log a_label` and its gradient `a - onehot(label)`.
pub fn cross_entropy(z: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= z.len() {
        return Err(Error::IndexOutOfRange {
            what: "classes",
            index: label,
            len: z.len(),
        });
    }
    let mut grad = softmax(z)?;
    let loss = log_sum_exp(z) - z[label];
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

/// Paired labels `[coarse, fine]` for a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLabels {
    pub coarse: Vec<usize>,
    pub fine: Vec<usize>,
}

impl BatchLabels {
    pub fn new(coarse: Vec<usize>, fine: Vec<usize>, tree: &LabelTree) -> Result<Self> {
        if coarse.len() != fine.len() {
            return Err(Error::shape("coarse and fine label vectors differ in length"));
        }
        for (i, (&c, &f)) in coarse.iter().zip(&fine).enumerate() {
            if tree.parent(f)? != c {
                return Err(Error::InconsistentLabels(format!(
                    "sample {i}: fine {f} has parent {}, labelled coarse {c}",
                    tree.parent(f)?
                )));
            }
        }
        Ok(Self { coarse, fine })
    }

    /// Labels from fine indices alone, coarse taken from the tree.
    pub fn from_fine(fine: Vec<usize>, tree: &LabelTree) -> Result<Self> {
        let coarse = fine.iter().map(|&f| tree.parent(f)).collect::<Result<_>>()?;
        Ok(Self { coarse, fine })
    }

    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }
}

/// Per-sample weights, each either 1 or b.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyMask {
    pub alpha: Vec<f64>,
}

impl PenaltyMask {
    pub fn violations(&self) -> usize {
        self.alpha.iter().filter(|&&a| a != 1.0).count()
    }
}

fn batch_dims(z: &Tensor, labels: &BatchLabels, tree: &LabelTree) -> Result<(usize, usize)> {
    let (n, c) = z.dims2()?;
    if n != labels.len() {
        return Err(Error::shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    if c != tree.num_fine() {
        return Err(Error::shape(format!("{c} fine logits for {} fine classes", tree.num_fine())));
    }
    Ok((n, c))
}

fn check_penalty(b: f64) -> Result<()> {
    if !(b >= 1.0 && b.is_finite()) {
        return Err(Error::InvalidConfig(format!("penalty b must be finite and >= 1, got {b}")));
    }
    Ok(())
}

pub fn penalty_mask(z_fine: &Tensor, labels: &BatchLabels, tree: &LabelTree, b: f64) -> Result<PenaltyMask> {
    check_penalty(b)?;
    let (n, _) = batch_dims(z_fine, labels, tree)?;
    let alpha = (0..n)
        .map(|i| {
            let pred = argmax(z_fine.row(i));
            Ok(if tree.is_violation(pred, labels.coarse[i])? { b } else { 1.0 })
        })
        .collect::<Result<_>>()?;
    Ok(PenaltyMask { alpha })
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient w.r.t. the `[n × C]` logits.
    pub grad: Tensor,
}

/// Plain cross-entropy over a batch of logits.
pub fn batch_cross_entropy(z: &Tensor, labels: &[usize], reduction: Reduction) -> Result<LossOutput> {
    let (n, c) = z.dims2()?;
    if n != labels.len() {
        return Err(Error::shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    let scale = reduction.factor(n);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (i, &label) in labels.iter().enumerate() {
        let (l, g) = cross_entropy(z.row(i), label)?;
        loss += l;
        grad.extend(g.into_iter().map(|v| v * scale));
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad: Tensor::new(vec![n, c], grad)?,
    })
}

#[derive(Clone, Debug)]
pub struct GceOutput {
    pub loss: f64,
    pub grad: Tensor,
    pub mask: PenaltyMask,
}

/// `reduce_i( α_i · (−log a_{i, fine_i}) )` with gradient `α_i (a_i − y_i)`.
pub fn generalized_cross_entropy(
    z_fine: &Tensor,
    labels: &BatchLabels,
    tree: &LabelTree,
    b: f64,
    reduction: Reduction,
) -> Result<GceOutput> {
    let (n, c) = batch_dims(z_fine, labels, tree)?;
    let mask = penalty_mask(z_fine, labels, tree, b)?;
    let scale = reduction.factor(n);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (i, &alpha) in mask.alpha.iter().enumerate() {
        let (l, g) = cross_entropy(z_fine.row(i), labels.fine[i])?;
        loss += alpha * l;
        grad.extend(g.into_iter().map(|v| alpha * v * scale));
    }
    Ok(GceOutput {
        loss: loss * scale,
        grad: Tensor::new(vec![n, c], grad)?,
        mask,
    })
}

/// Loss-weight ratio `W_t : W_g` between coarse CE and fine GCE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRatio {
    pub coarse: f64,
    pub fine: f64,
}

impl LossRatio {
    pub fn new(coarse: f64, fine: f64) -> Result<Self> {
        if !(coarse > 0.0 && fine > 0.0 && coarse.is_finite() && fine.is_finite()) {
            return Err(Error::NonPositiveRatio(coarse, fine));
        }
        Ok(Self { coarse, fine })
    }

    /// `(W_t, W_g)` normalized to sum to one.
    pub fn weights(&self) -> (f64, f64) {
        let total = self.coarse + self.fine;
        (self.coarse / total, self.fine / total)
    }
}

impl Default for LossRatio {
    fn default() -> Self {
        Self { coarse: 7.0, fine: 3.0 }
    }
}

impl fmt::Display for LossRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.coarse, self.fine)
    }
}

impl FromStr for LossRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("expected a ratio like 7:3, got {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let a: f64 = a.trim().parse().map_err(|_| bad())?;
        let b: f64 = b.trim().parse().map_err(|_| bad())?;
        LossRatio::new(a, b)
    }
}

impl Serialize for LossRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LossRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `W_t·loss_coarse + W_g·loss_fine` with `W_t + W_g = 1`.
pub fn combined_loss(loss_coarse: f64, loss_fine: f64, ratio: LossRatio) -> Result<f64> {
    let ratio = LossRatio::new(ratio.coarse, ratio.fine)?;
    let (wt, wg) = ratio.weights();
    Ok(wt * loss_coarse + wg * loss_fine)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    /// Weight applied to samples whose fine prediction leaves the true coarse class.
    pub b: f64,
    pub r: LossRatio,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            b: 2.0,
            r: LossRatio::default(),
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        check_penalty(self.b)?;
        LossRatio::new(self.r.coarse, self.r.fine)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnMap};
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn cars() -> LabelTree {
        LabelTree::build(&[("Audi", "Audi A8"), ("Audi", "Audi A6"), ("Haval", "Haval H3")]).unwrap()
    }

    #[test]
    fn softmax_cases() {
        let a = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(a.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let a = softmax(&[1000.0, 0.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-15 && a[1] >= 0.0 && a[1] < 1e-300);
        let a = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, g) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, _) = cross_entropy(&[0.0, 3f64.ln()], 1).unwrap();
        assert!((l - 0.287682072451781).abs() < 1e-12);
        assert!(matches!(cross_entropy(&[0.0], 1), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let op = FnMap::new(
            |z: &Tensor| Ok(cross_entropy(z.data(), 2)?.0),
            |z: &Tensor| Ok(Tensor::from_vec(cross_entropy(z.data(), 2)?.1)),
        );
        for seed in 0..10 {
            let z = Tensor::randn(&[5], 2.0, &mut Rng::new(seed));
            let r = grad_check(&op, &z, 1e-6).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn penalty_mask_follows_the_tree() {
        let t = cars();
        let labels = BatchLabels::new(vec![0, 0], vec![0, 0], &t).unwrap();
        // row 0 predicts Audi A6 (sibling), row 1 predicts Haval H3 (other make)
        let z = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(penalty_mask(&z, &labels, &t, 2.0).unwrap().alpha, vec![1.0, 2.0]);
        assert_eq!(penalty_mask(&z, &labels, &t, 1.0).unwrap().alpha, vec![1.0, 1.0]);
        assert!(penalty_mask(&z, &labels, &t, 0.5).is_err());
    }

    #[test]
    fn gce_hand_values() {
        let split = LabelTree::build(&[("A", "a"), ("B", "b")]).unwrap();
        let joint = LabelTree::build(&[("A", "a"), ("A", "b")]).unwrap();
        let z = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let expected = (1.0 + 1f64.exp()).ln();
        let l = BatchLabels::from_fine(vec![0], &split).unwrap();
        let out = generalized_cross_entropy(&z, &l, &split, 2.0, Reduction::Sum).unwrap();
        assert!((out.loss - 2.0 * expected).abs() < 1e-12);
        assert!((out.loss - 2.626523).abs() < 1e-6);
        let l = BatchLabels::from_fine(vec![0], &joint).unwrap();
        let out = generalized_cross_entropy(&z, &l, &joint, 2.0, Reduction::Sum).unwrap();
        assert!((out.loss - 1.313262).abs() < 1e-6);
    }

    #[test]
    fn batch_labels_reject_inconsistent_pairs() {
        let t = cars();
        assert!(matches!(
            BatchLabels::new(vec![1], vec![0], &t),
            Err(Error::InconsistentLabels(_))
        ));
    }

    #[test]
    fn combined_loss_cases() {
        let r = |s: &str| s.parse::<LossRatio>().unwrap();
        assert_eq!(combined_loss(2.0, 4.0, r("1:1")).unwrap(), 3.0);
        assert!((combined_loss(1.0, 1.0, r("7:3")).unwrap() - 1.0).abs() < 1e-15);
        assert!((combined_loss(0.0, 1.0, r("7:3")).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(
            combined_loss(1.0, 1.0, LossRatio { coarse: 0.0, fine: 1.0 }),
            Err(Error::NonPositiveRatio(..))
        ));
        assert!("7".parse::<LossRatio>().is_err());
        assert!("-1:2".parse::<LossRatio>().is_err());
        assert_eq!(r("7:3").to_string(), "7:3");
    }

    #[test]
    fn gce_gradient_matches_finite_differences_off_switching_surfaces() {
        let t = LabelTree::build(&[("A", "a0"), ("A", "a1"), ("B", "b0"), ("B", "b1"), ("C", "c0")]).unwrap();
        let labels = BatchLabels::from_fine(vec![0, 2, 4, 1], &t).unwrap();
        let t2 = t.clone();
        let l2 = labels.clone();
        let op = FnMap::with_kinks(
            move |z: &Tensor| Ok(generalized_cross_entropy(z, &labels, &t, 2.0, Reduction::Mean)?.loss),
            move |z: &Tensor| Ok(generalized_cross_entropy(z, &l2, &t2, 2.0, Reduction::Mean)?.grad),
            |z: &Tensor| {
                // gap between the two largest logits of every row
                (0..z.shape()[0])
                    .map(|i| {
                        let mut r = z.row(i).to_vec();
                        r.sort_by(|a, b| b.total_cmp(a));
                        r[0] - r[1]
                    })
                    .fold(f64::INFINITY, f64::min)
                    * 0.1
            },
        );
        let mut checked = 0;
        for seed in 0..50 {
            let z = Tensor::randn(&[4, 5], 2.0, &mut Rng::new(seed));
            let r = grad_check(&op, &z, 1e-6).unwrap();
            if r.skipped {
                continue;
            }
            assert!(r.passed(), "seed {seed}: {r:?}");
            checked += 1;
        }
        assert!(checked >= 20);
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (1usize..6).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0f64..5.0, n * 6),
                prop::collection::vec(0usize..6, n),
            )
        })
    }

    fn six_class_tree() -> LabelTree {
        LabelTree::build(&[("A", "a0"), ("A", "a1"), ("B", "b0"), ("B", "b1"), ("C", "c0"), ("C", "c1")]).unwrap()
    }

    proptest! {
        #[test]
        fn gce_with_unit_penalty_is_summed_ce((z, fine) in arb_batch()) {
            let t = six_class_tree();
            let n = fine.len();
            let z = Tensor::new(vec![n, 6], z).unwrap();
            let labels = BatchLabels::from_fine(fine.clone(), &t).unwrap();
            let gce = generalized_cross_entropy(&z, &labels, &t, 1.0, Reduction::Sum).unwrap();
            let ce: f64 = (0..n).map(|i| cross_entropy(z.row(i), fine[i]).unwrap().0).sum();
            prop_assert!((gce.loss - ce).abs() <= 1e-12 * ce.abs().max(1.0));
        }

        #[test]
        fn gce_is_monotone_in_penalty((z, fine) in arb_batch(), b1 in 1.0f64..4.0, db in 0.01f64..2.0) {
            let t = six_class_tree();
            let n = fine.len();
            let z = Tensor::new(vec![n, 6], z).unwrap();
            let labels = BatchLabels::from_fine(fine, &t).unwrap();
            let lo = generalized_cross_entropy(&z, &labels, &t, b1, Reduction::Sum).unwrap();
            let hi = generalized_cross_entropy(&z, &labels, &t, b1 + db, Reduction::Sum).unwrap();
            if lo.mask.violations() > 0 {
                prop_assert!(hi.loss > lo.loss);
            } else {
                prop_assert_eq!(hi.loss, lo.loss);
            }
        }
    }
}
