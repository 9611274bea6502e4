//! Finite-difference checks for every layer and for the assembled training
//! objective, used by `sbp gradcheck` and the test suites.
//!
//! Each check projects the layer output onto a random direction to get a
//! scalar. Points that land within [`KINK_MARGIN`](crate::gradcheck::KINK_MARGIN)
//! of a kink are redrawn, so every check evaluates `seeds` points.

use crate::bilinear::{
    bilinear_pool, bilinear_pool_backward, l2_normalize, l2_normalize_backward, signed_sqrt, signed_sqrt_backward,
    BilinearDescriptor,
};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, FnMap};
use crate::loss::{batch_cross_entropy, generalized_cross_entropy, BatchLabels, LossRatio, PenaltyConfig, Reduction};
use crate::network::{BackwardScope, SbpNetwork};
use crate::ops;
use crate::backbone::TrunkConfig;
use crate::tensor::{Rng, Tensor};
use crate::trainer::{batch_objective, TrainConfig};
use crate::tree::LabelTree;

/// Redraws allowed per requested point before giving up.
const MAX_REDRAWS: usize = 50;

const SUITE_SALT: u64 = 0x005e_ed0f_9c4e;

pub const CHECK_NAMES: [&str; 17] = [
    "conv2d.input",
    "conv2d.weight",
    "conv2d.bias",
    "relu",
    "maxpool2x2",
    "linear.input",
    "linear.weight",
    "linear.bias",
    "bilinear_pool",
    "signed_sqrt",
    "l2_normalize",
    "descriptor",
    "cross_entropy",
    "gce",
    "pipeline.params",
    "pipeline.input",
    "pipeline.baseline",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    /// Points evaluated.
    pub checked: usize,
    /// Points redrawn because they sat on a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs every check on `seeds` points. `corrupt` names one check whose
/// analytic gradient is scaled by 1.01.
pub fn run_suite(tolerance: f64, seeds: usize, corrupt: Option<&str>) -> Result<Vec<SuiteEntry>> {
    if let Some(name) = corrupt {
        if !CHECK_NAMES.contains(&name) {
            return Err(Error::InvalidConfig(format!("unknown check {name:?}")));
        }
    }
    CHECK_NAMES
        .iter()
        .map(|&name| run_check(name, tolerance, seeds, corrupt == Some(name)))
        .collect()
}

pub fn run_check(name: &str, tolerance: f64, seeds: usize, corrupt: bool) -> Result<SuiteEntry> {
    if seeds == 0 {
        return Err(Error::EmptyInput);
    }
    let mut entry = SuiteEntry {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        passed: true,
    };
    let mut draw = 0u64;
    while entry.checked < seeds {
        if entry.skipped > MAX_REDRAWS * seeds {
            return Err(Error::InvalidConfig(format!("{name}: too many points on kinks")));
        }
        let mut rng = Rng::new(SUITE_SALT ^ draw).split(name_hash(name));
        draw += 1;
        let report = check_point(name, &mut rng, tolerance, corrupt)?;
        if report.skipped {
            entry.skipped += 1;
            continue;
        }
        entry.checked += 1;
        entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
        entry.passed &= report.passed();
    }
    Ok(entry)
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn scaled(t: Tensor, corrupt: bool) -> Tensor {
    if corrupt {
        t.scale(1.01)
    } else {
        t
    }
}

fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn check_point(name: &str, rng: &mut Rng, tol: f64, corrupt: bool) -> Result<crate::gradcheck::GradCheckReport> {
    let k = |t: Tensor| scaled(t, corrupt);
    match name {
        "conv2d.input" | "conv2d.weight" | "conv2d.bias" => {
            let x = Tensor::randn(&[2, 6, 6], 1.0, rng);
            let w = Tensor::randn(&[3, 2, 3, 3], 1.0, rng);
            let b = Tensor::randn(&[3], 1.0, rng);
            let p = Tensor::randn(&[3, 6, 6], 1.0, rng);
            let value = |x: &Tensor, w: &Tensor, b: &Tensor| ops::conv2d_forward(x, w, b)?.dot(&p);
            let grads = |x: &Tensor, w: &Tensor| ops::conv2d_backward(x, w, &p);
            match name {
                "conv2d.input" => grad_check(
                    &FnMap::new(|x: &Tensor| value(x, &w, &b), |x: &Tensor| Ok(k(grads(x, &w)?.input))),
                    &x,
                    tol,
                ),
                "conv2d.weight" => grad_check(
                    &FnMap::new(|w: &Tensor| value(&x, w, &b), |w: &Tensor| Ok(k(grads(&x, w)?.weights))),
                    &w,
                    tol,
                ),
                _ => grad_check(
                    &FnMap::new(|b: &Tensor| value(&x, &w, b), |_: &Tensor| Ok(k(grads(&x, &w)?.bias))),
                    &b,
                    tol,
                ),
            }
        }
        "relu" => {
            let x = Tensor::randn(&[24], 1.0, rng);
            let p = Tensor::randn(&[24], 1.0, rng);
            grad_check(
                &FnMap::with_kinks(
                    |x: &Tensor| ops::relu_forward(x).dot(&p),
                    |x: &Tensor| Ok(k(ops::relu_backward(x, &p)?)),
                    min_abs,
                ),
                &x,
                tol,
            )
        }
        "maxpool2x2" => {
            let x = Tensor::randn(&[2, 4, 6], 1.0, rng);
            let p = Tensor::randn(&[2, 2, 3], 1.0, rng);
            grad_check(
                &FnMap::with_kinks(
                    |x: &Tensor| ops::maxpool2x2_forward(x)?.0.dot(&p),
                    |x: &Tensor| {
                        let (_, argmax) = ops::maxpool2x2_forward(x)?;
                        Ok(k(ops::maxpool2x2_backward(x.shape(), &argmax, &p)?))
                    },
                    |x: &Tensor| ops::maxpool_margin(x).unwrap_or(0.0),
                ),
                &x,
                tol,
            )
        }
        "linear.input" | "linear.weight" | "linear.bias" => {
            let x = Tensor::randn(&[7], 1.0, rng);
            let w = Tensor::randn(&[5, 7], 1.0, rng);
            let b = Tensor::randn(&[5], 1.0, rng);
            let p = Tensor::randn(&[5], 1.0, rng);
            let value = |x: &Tensor, w: &Tensor, b: &Tensor| ops::linear_forward(x, w, b)?.dot(&p);
            let grads = |x: &Tensor, w: &Tensor| ops::linear_backward(x, w, &p);
            match name {
                "linear.input" => grad_check(
                    &FnMap::new(|x: &Tensor| value(x, &w, &b), |x: &Tensor| Ok(k(grads(x, &w)?.input))),
                    &x,
                    tol,
                ),
                "linear.weight" => grad_check(
                    &FnMap::new(|w: &Tensor| value(&x, w, &b), |w: &Tensor| Ok(k(grads(&x, w)?.weights))),
                    &w,
                    tol,
                ),
                _ => grad_check(
                    &FnMap::new(|b: &Tensor| value(&x, &w, b), |_: &Tensor| Ok(k(grads(&x, &w)?.bias))),
                    &b,
                    tol,
                ),
            }
        }
        "bilinear_pool" => {
            let x = Tensor::randn(&[4, 3, 2], 1.0, rng);
            let p = Tensor::randn(&[4, 4], 1.0, rng);
            grad_check(
                &FnMap::new(
                    |x: &Tensor| bilinear_pool(x)?.dot(&p),
                    |x: &Tensor| Ok(k(bilinear_pool_backward(x, &p)?)),
                ),
                &x,
                tol,
            )
        }
        "signed_sqrt" => {
            let x = Tensor::randn(&[16], 1.0, rng);
            let p = Tensor::randn(&[16], 1.0, rng);
            grad_check(
                &FnMap::with_kinks(
                    |x: &Tensor| signed_sqrt(x)?.dot(&p),
                    |x: &Tensor| Ok(k(signed_sqrt_backward(x, &p)?)),
                    min_abs,
                ),
                &x,
                tol,
            )
        }
        "l2_normalize" => {
            let x = Tensor::randn(&[16], 1.0, rng);
            let p = Tensor::randn(&[16], 1.0, rng);
            grad_check(
                &FnMap::new(
                    |x: &Tensor| l2_normalize(x)?.dot(&p),
                    |x: &Tensor| Ok(k(l2_normalize_backward(x, &p)?)),
                ),
                &x,
                tol,
            )
        }
        "descriptor" => {
            let x = Tensor::randn(&[3, 2, 2], 1.0, rng);
            let p = Tensor::randn(&[9], 1.0, rng);
            grad_check(
                &FnMap::with_kinks(
                    |x: &Tensor| BilinearDescriptor::compute(x)?.normalized.dot(&p),
                    |x: &Tensor| Ok(k(BilinearDescriptor::compute(x)?.backward(x, &p)?)),
                    |x: &Tensor| BilinearDescriptor::compute(x).map_or(0.0, |d| min_abs(&d.gram)),
                ),
                &x,
                tol,
            )
        }
        "cross_entropy" => {
            let z = Tensor::randn(&[3, 5], 2.0, rng);
            let labels: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
            grad_check(
                &FnMap::new(
                    |z: &Tensor| Ok(batch_cross_entropy(z, &labels, Reduction::Mean)?.loss),
                    |z: &Tensor| Ok(k(batch_cross_entropy(z, &labels, Reduction::Mean)?.grad)),
                ),
                &z,
                tol,
            )
        }
        "gce" => {
            let tree = check_tree();
            let z = Tensor::randn(&[4, tree.num_fine()], 2.0, rng);
            let fine = (0..4).map(|_| rng.below(tree.num_fine())).collect();
            let labels = BatchLabels::from_fine(fine, &tree)?;
            let gce = |z: &Tensor| generalized_cross_entropy(z, &labels, &tree, 2.0, Reduction::Mean);
            grad_check(
                &FnMap::with_kinks(
                    |z: &Tensor| Ok(gce(z)?.loss),
                    |z: &Tensor| Ok(k(gce(z)?.grad)),
                    |z: &Tensor| (0..z.shape()[0]).map(|i| top_margin(z.row(i))).fold(f64::INFINITY, f64::min),
                ),
                &z,
                tol,
            )
        }
        "pipeline.params" | "pipeline.baseline" => {
            let two_branch = name == "pipeline.params";
            let (net, samples, cfg) = pipeline_setup(rng, two_branch)?;
            let tree = check_tree();
            let refs: Vec<&Sample> = samples.iter().collect();
            let eval = |flat: &Tensor| -> Result<(f64, Tensor, f64)> {
                let mut net = net.clone();
                net.set_flat_values(flat)?;
                net.zero_grad();
                let obj = batch_objective(&mut net, &tree, &cfg, &refs, BackwardScope::Full)?;
                Ok((obj.loss, net.flat_grads(), obj.kink_distance))
            };
            grad_check(
                &FnMap::with_kinks(
                    |f: &Tensor| Ok(eval(f)?.0),
                    |f: &Tensor| Ok(k(eval(f)?.1)),
                    |f: &Tensor| eval(f).map_or(0.0, |r| r.2),
                ),
                &net.flat_values(),
                tol,
            )
        }
        "pipeline.input" => {
            let (net, samples, cfg) = pipeline_setup(rng, true)?;
            let tree = check_tree();
            let label = &samples[0];
            let eval = |x: &Tensor| -> Result<(f64, Tensor, f64)> {
                let mut net = net.clone();
                let s = Sample {
                    x: x.clone(),
                    coarse: label.coarse,
                    fine: label.fine,
                };
                let mut obj = batch_objective(&mut net, &tree, &cfg, &[&s], BackwardScope::Full)?;
                Ok((obj.loss, obj.input_grads.remove(0), obj.kink_distance))
            };
            grad_check(
                &FnMap::with_kinks(
                    |x: &Tensor| Ok(eval(x)?.0),
                    |x: &Tensor| Ok(k(eval(x)?.1)),
                    |x: &Tensor| eval(x).map_or(0.0, |r| r.2),
                ),
                &label.x,
                tol,
            )
        }
        _ => Err(Error::InvalidConfig(format!("unknown check {name:?}"))),
    }
}

fn top_margin(z: &[f64]) -> f64 {
    let mut v = z.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[0] - v[1]
}

/// Two coarse classes with two fine children each.
fn check_tree() -> LabelTree {
    LabelTree::build(&[("a", "a0"), ("a", "a1"), ("b", "b0"), ("b", "b1")]).expect("valid tree")
}

/// A small network, a batch of three labelled inputs and a penalized
/// objective with both branches (or the fine branch alone).
fn pipeline_setup(rng: &mut Rng, two_branch: bool) -> Result<(SbpNetwork, Vec<Sample>, TrainConfig)> {
    let tree = check_tree();
    let trunk = TrunkConfig {
        input: [1, 8, 8],
        cnet_blocks: vec![3],
        fnet_blocks: vec![4],
    };
    let mut net = SbpNetwork::init(trunk, tree.num_coarse(), tree.num_fine(), rng)?;
    // Nonzero biases so that no unit is dead by construction.
    for p in net.params_mut() {
        if p.value.ndim() == 1 {
            p.value = Tensor::randn(p.value.shape(), 0.1, rng);
        }
    }
    let samples = (0..3)
        .map(|_| {
            let fine = rng.below(tree.num_fine());
            Ok(Sample {
                x: Tensor::randn(&[1, 8, 8], 1.0, rng),
                coarse: tree.parent(fine)?,
                fine,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        penalty: PenaltyConfig {
            b: 2.0,
            r: LossRatio::new(7.0, 3.0)?,
        },
        two_branch,
        ..TrainConfig::default()
    };
    Ok((net, samples, cfg))
}
