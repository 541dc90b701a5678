//! Central finite-difference oracle for tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Pass threshold on the relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor of [`relative_error`]. Below this magnitude the
/// comparison is effectively absolute, which keeps round-off in `f` from
/// dominating components whose true gradient is zero.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = central_difference(&mut f, &mut probe, i, h);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

fn central_difference(
    f: &mut impl FnMut(&Tensor) -> f64,
    probe: &mut Tensor,
    i: usize,
    h: f64,
) -> f64 {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + h;
    let plus = f(probe);
    probe.data_mut()[i] = orig - h;
    let minus = f(probe);
    probe.data_mut()[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(flat index, analytic, numeric)` of the worst element.
    pub worst: (usize, f64, f64),
}

impl InputReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// A scalar-valued program over tape leaves. Leaves carry their tape, so
/// new nodes are recorded next to them.
pub trait ScalarFn: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> {}

impl<F> ScalarFn for F where F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> {}

/// Pins a closure to the higher-ranked [`ScalarFn`] signature, which the
/// compiler does not infer for closures bound to a local first.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives one leaf per named input and must return a scalar. The
/// numeric side evaluates `f` on fresh tapes with constant leaves, so it
/// never touches a backward closure.
pub fn check_gradients<F>(
    f: F,
    inputs: &[(String, Tensor)],
    opts: &CheckOptions,
) -> Result<Vec<InputReport>>
where
    F: ScalarFn,
{
    check_gradients_with(f, inputs, opts, |_, _| {})
}

/// As [`check_gradients`], letting `adjust` rewrite each analytic gradient
/// before comparison (used to verify that corrupted gradients are caught).
pub fn check_gradients_with<F>(
    f: F,
    inputs: &[(String, Tensor)],
    opts: &CheckOptions,
    adjust: impl Fn(usize, &mut Tensor),
) -> Result<Vec<InputReport>>
where
    F: ScalarFn,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let root = f(&leaves)?;
        let grads = tape.backward(root)?;
        leaves.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        f(&leaves)?.item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, tensor)) in inputs.iter().enumerate() {
        let mut grad = analytic[k].clone();
        adjust(k, &mut grad);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < tensor.len() => {
                let mut c = rand::seq::index::sample(&mut rng, tensor.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..tensor.len()).collect(),
        };
        let mut report = InputReport {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for &i in &coords {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::Contract(format!(
                    "non-finite gradient for {name}[{i}]: analytic {a}, numeric {numeric}"
                )));
            }
            let err = relative_error(a, numeric);
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, a, numeric);
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.0);
        let g = finite_difference_grad(|t| t.sum(), &x, DEFAULT_STEP);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn detects_wrong_gradient() {
        let inputs = vec![(
            "x".to_string(),
            Tensor::from_fn(&[4], |i| 0.3 * i as f64 - 0.5),
        )];
        let f = scalar_fn(|v| Ok(v[0].tanh().sum()));
        let ok = check_gradients(f, &inputs, &CheckOptions::default()).unwrap();
        assert!(ok[0].passes(DEFAULT_TOLERANCE), "{ok:?}");
        let bad = check_gradients_with(f, &inputs, &CheckOptions::default(), |_, g| {
            g.data_mut()[1] *= 1.01;
        })
        .unwrap();
        assert!(!bad[0].passes(DEFAULT_TOLERANCE));
        assert_eq!(bad[0].worst.0, 1);
    }
}
