//! Central-difference gradient checking.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Options for [`grad_check_with`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Upper bound on coordinates probed per input tensor. Larger inputs are
    /// probed at evenly strided coordinates, always including the first and last.
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over probed coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences at every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&tape, &leaves)?;
        let grads = tape.backward(root)?;
        leaves
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
            })
            .collect::<Vec<_>>()
    };

    let eval = |args: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        // leaves, so objectives that differentiate internally (gradient
        // penalties) see the same graph in both passes
        let leaves: Vec<Var> = args.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&tape, &leaves)?;
        let value = root.value();
        if value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(value.shape().to_vec()));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite("grad_check objective"));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut args = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for coord in probe_coords(input.len(), opts.max_coords_per_input) {
            let orig = input.data()[coord];
            args[i].data_mut()[coord] = orig + opts.eps;
            let plus = eval(&args)?;
            args[i].data_mut()[coord] = orig - opts.eps;
            let minus = eval(&args)?;
            args[i].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let exact = analytic[i].data()[coord];
            let err = (exact - numeric).abs() / 1f64.max(exact.abs()).max(numeric.abs());
            if !err.is_finite() {
                return Err(AutodiffError::NonFinite("grad_check comparison"));
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, coord));
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

fn probe_coords(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k > 0 && len > k => {
            if k == 1 {
                return vec![0];
            }
            let mut v: Vec<usize> = (0..k).map(|j| j * (len - 1) / (k - 1)).collect();
            v.dedup();
            v
        }
        _ => (0..len).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_fn(&[5], |i| i as f64);
        let r = grad_check(|t, _| Ok(t.scalar(3.0)), &[x], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coords_checked, 5);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from the analytic pass only
        let x = Tensor::from_fn(&[3], |i| 1.0 + i as f64);
        let r = grad_check(|_, v| v[0].detach().square()?.sum(), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn probe_coords_covers_ends() {
        assert_eq!(probe_coords(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(probe_coords(3, Some(8)), vec![0, 1, 2]);
    }
}
