//! Central-difference gradient oracle and comparison helpers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element.
///
/// `f` must return a single-element tensor.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let out = f(t)?;
        out.item().map_err(|_| {
            Error::Contract(format!(
                "finite differences need a scalar function, got output shape {:?}",
                out.shape()
            ))
        })
    };
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Outcome of comparing one analytic derivative with its numeric estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
    pub absolute: f64,
}

impl GradComparison {
    pub fn new(analytic: f64, numeric: f64) -> Self {
        Self {
            analytic,
            numeric,
            relative: relative_error(analytic, numeric),
            absolute: (analytic - numeric).abs(),
        }
    }

    /// Passes on relative error, or on absolute error where both sides are ~0.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.relative < rel_tol || self.absolute < abs_tol
    }
}
