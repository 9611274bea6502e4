//! Central finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Points closer than this to a non-differentiable surface are skipped.
pub const KINK_MARGIN: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-8;

/// A scalar function of one tensor together with its analytic gradient.
pub trait Differentiable {
    fn value(&self, x: &Tensor) -> Result<f64>;
    fn gradient(&self, x: &Tensor) -> Result<Tensor>;
    /// Distance from `x` to the nearest kink, in whatever units the map
    /// switches on (pre-activation, pooling gap, ...).
    fn kink_distance(&self, _x: &Tensor) -> f64 {
        f64::INFINITY
    }
}

/// Adapts a pair of closures into a [`Differentiable`].
pub struct FnMap<F, G, K = fn(&Tensor) -> f64> {
    value: F,
    gradient: G,
    kink: Option<K>,
}

impl<F, G> FnMap<F, G>
where
    F: Fn(&Tensor) -> Result<f64>,
    G: Fn(&Tensor) -> Result<Tensor>,
{
    pub fn new(value: F, gradient: G) -> Self {
        Self {
            value,
            gradient,
            kink: None,
        }
    }
}

impl<F, G, K> FnMap<F, G, K>
where
    F: Fn(&Tensor) -> Result<f64>,
    G: Fn(&Tensor) -> Result<Tensor>,
    K: Fn(&Tensor) -> f64,
{
    pub fn with_kinks(value: F, gradient: G, kink: K) -> Self {
        Self {
            value,
            gradient,
            kink: Some(kink),
        }
    }
}

impl<F, G, K> Differentiable for FnMap<F, G, K>
where
    F: Fn(&Tensor) -> Result<f64>,
    G: Fn(&Tensor) -> Result<Tensor>,
    K: Fn(&Tensor) -> f64,
{
    fn value(&self, x: &Tensor) -> Result<f64> {
        (self.value)(x)
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        (self.gradient)(x)
    }

    fn kink_distance(&self, x: &Tensor) -> f64 {
        self.kink.as_ref().map_or(f64::INFINITY, |k| k(x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |a - n| / max(|a|, |n|, 1e-8)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tolerance: f64,
    /// The point sat within [`KINK_MARGIN`] of a kink and was not checked.
    pub skipped: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.skipped && self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Five-point central differences of `op` at `input`, one coordinate at a
/// time: `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`.
pub fn numeric_gradient(op: &impl Differentiable, input: &Tensor) -> Result<Tensor> {
    let mut probe = input.clone();
    let mut out = Tensor::zeros(input.shape());
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            let v = op.value(&probe)?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(format!("map value near coordinate {i}")));
            }
            Ok(v)
        };
        let (m2, m1, p1, p2) = (at(-2.0 * STEP)?, at(-STEP)?, at(STEP)?, at(2.0 * STEP)?);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP);
    }
    Ok(out)
}

pub fn grad_check(op: &impl Differentiable, input: &Tensor, tolerance: f64) -> Result<GradCheckReport> {
    input.ensure_finite("grad_check input")?;
    let skipped_report = || GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tolerance,
        skipped: true,
    };
    if op.kink_distance(input) < KINK_MARGIN {
        return Ok(skipped_report());
    }
    let centre = op.value(input)?;
    if !centre.is_finite() {
        return Err(Error::NonFiniteValue("map value".into()));
    }
    let analytic = op.gradient(input)?;
    analytic.expect_shape(input.shape(), "analytic gradient")?;
    analytic.ensure_finite("analytic gradient")?;
    let numeric = numeric_gradient(op, input)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: input.numel(),
        tolerance,
        skipped: false,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = relative_error(a, n);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{linear_backward, linear_forward};
    use crate::tensor::Rng;

    fn linear_probe(corrupt: f64) -> impl Differentiable {
        let mut rng = Rng::new(11);
        let w = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let proj = Tensor::randn(&[4], 1.0, &mut rng);
        let (w2, proj2) = (w.clone(), proj.clone());
        FnMap::new(
            move |x: &Tensor| linear_forward(x, &w, &b)?.dot(&proj),
            move |x: &Tensor| Ok(linear_backward(x, &w2, &proj2)?.input.scale(corrupt)),
        )
    }

    #[test]
    fn linear_layer_passes() {
        let x = Tensor::randn(&[4], 1.0, &mut Rng::new(1));
        let report = grad_check(&linear_probe(1.0), &x, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::randn(&[4], 1.0, &mut Rng::new(1));
        let report = grad_check(&linear_probe(1.01), &x, 1e-4).unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error - 0.01 / 1.01).abs() < 1e-6);
    }

    #[test]
    fn constant_map_has_zero_gradients() {
        let op = FnMap::new(|_: &Tensor| Ok(3.0), |x: &Tensor| Ok(Tensor::zeros(x.shape())));
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(numeric_gradient(&op, &x).unwrap(), Tensor::zeros(&[2]));
        let report = grad_check(&op, &x, 1e-4).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let op = FnMap::new(
            |x: &Tensor| Ok(x.data()[0].ln()),
            |x: &Tensor| Ok(x.map(|v| 1.0 / v)),
        );
        let x = Tensor::from_vec(vec![-1.0]);
        assert!(matches!(grad_check(&op, &x, 1e-4), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn kink_adjacent_point_is_skipped() {
        let op = FnMap::with_kinks(
            |x: &Tensor| Ok(x.data()[0].abs()),
            |x: &Tensor| Ok(x.map(f64::signum)),
            |x: &Tensor| x.data()[0].abs(),
        );
        let report = grad_check(&op, &Tensor::from_vec(vec![1e-6]), 1e-4).unwrap();
        assert!(report.skipped);
        assert!(!report.passed());
        assert!(grad_check(&op, &Tensor::from_vec(vec![0.5]), 1e-4).unwrap().passed());
    }
}
