//! Accuracy and hierarchy-aware error rates over a frozen network.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::argmax;
use crate::network::SbpNetwork;
use crate::tree::LabelTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Fine-branch top-1 accuracy.
    pub fine_top1: f64,
    /// Parent of the predicted fine class vs the true coarse class.
    pub coarse_top1_via_fine: f64,
    /// Coarse head's own accuracy. Diagnostic only.
    pub coarse_top1_head: f64,
    /// Fraction of all samples whose fine prediction has the wrong parent.
    pub violation_rate: f64,
    /// Fraction of all samples mispredicted within the right coarse class.
    pub intra_coarse_error_rate: f64,
    /// `confusion[true_fine][predicted_fine]`.
    pub confusion: Vec<Vec<u64>>,
}

pub const CSV_HEADER: &str = "samples,fine_top1,coarse_top1_via_fine,coarse_top1_head,violation_rate,intra_coarse_error_rate";

impl EvalReport {
    /// Builds the report from fine predictions and coarse-head predictions.
    pub fn from_predictions(
        tree: &LabelTree,
        truth: &[(usize, usize)],
        fine_pred: &[usize],
        coarse_head_pred: &[usize],
    ) -> Result<Self> {
        let n = truth.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if fine_pred.len() != n || coarse_head_pred.len() != n {
            return Err(Error::shape("prediction count differs from sample count"));
        }
        let nf = tree.num_fine();
        let mut confusion = vec![vec![0u64; nf]; nf];
        let (mut correct, mut coarse_ok, mut head_ok, mut violations, mut intra) = (0u64, 0u64, 0u64, 0u64, 0u64);
        for ((&(coarse, fine), &pred), &head) in truth.iter().zip(fine_pred).zip(coarse_head_pred) {
            if fine >= nf || pred >= nf {
                return Err(Error::IndexOutOfRange {
                    what: "fine classes",
                    index: fine.max(pred),
                    len: nf,
                });
            }
            confusion[fine][pred] += 1;
            let violation = tree.is_violation(pred, coarse)?;
            if pred == fine {
                correct += 1;
            } else if violation {
                violations += 1;
            } else {
                intra += 1;
            }
            coarse_ok += u64::from(!violation);
            head_ok += u64::from(head == coarse);
        }
        let frac = |k: u64| k as f64 / n as f64;
        Ok(Self {
            samples: n,
            fine_top1: frac(correct),
            coarse_top1_via_fine: frac(coarse_ok),
            coarse_top1_head: frac(head_ok),
            violation_rate: frac(violations),
            intra_coarse_error_rate: frac(intra),
            confusion,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.samples,
            self.fine_top1,
            self.coarse_top1_via_fine,
            self.coarse_top1_head,
            self.violation_rate,
            self.intra_coarse_error_rate
        )
    }
}

/// Fine predictions come from the inference path; ties go to the lowest index.
pub fn evaluate(net: &SbpNetwork, samples: &[Sample], tree: &LabelTree) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut truth = Vec::with_capacity(samples.len());
    let mut fine_pred = Vec::with_capacity(samples.len());
    let mut head_pred = Vec::with_capacity(samples.len());
    for s in samples {
        truth.push((s.coarse, s.fine));
        fine_pred.push(argmax(net.forward_infer(&s.x)?.data()));
        head_pred.push(argmax(net.forward_coarse(&s.x)?.data()));
    }
    EvalReport::from_predictions(tree, &truth, &fine_pred, &head_pred)
}
