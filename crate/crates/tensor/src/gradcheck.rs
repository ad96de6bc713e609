//! Central finite-difference gradient checking.
//!
//! The relative error of one element is `|a − n| / max(|a|, |n|, 1e-3)`, so
//! near-zero gradients are compared on an absolute scale of `1e-3`.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input, element, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.to_vec()))
        .collect::<Result<_>>()?;
    let out = f(&leaves);
    if !out.is_finite() {
        return Err(TensorError::NonFinite("gradcheck objective".into()));
    }
    out.backward()?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (ii, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for e in 0..leaf.numel() {
            let eval = |delta: f64| {
                let perturbed: Vec<Tensor> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut d = t.to_vec();
                        if j == ii {
                            d[e] += delta;
                        }
                        Tensor::new(t.shape(), d).expect("same shape")
                    })
                    .collect();
                f(&perturbed).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[e];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ii, e, a, numeric));
            }
        }
    }
    Ok(report)
}
