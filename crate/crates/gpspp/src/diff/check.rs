//! Finite-difference gradient checking.

use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Objective evaluator: `(params, want_grad) -> (value, gradients)`.
pub type GradEval<'a> = dyn FnMut(&[(String, Tensor)], bool) -> Result<(f64, Option<Vec<Tensor>>)> + 'a;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over every sampled coordinate.
    pub max_rel_err: f64,
    /// Name and coordinate of the worst offender.
    pub worst: Option<(String, usize)>,
    /// Coordinates compared.
    pub checked: usize,
}

/// Relative error with an absolute floor, equivalent to the usual
/// `|a - b| <= atol + rtol·max(|a|,|b|)` acceptance with `atol/rtol = 1e-3`.
/// Near-zero coordinates are judged by absolute error (1e-7 at the 1e-4
/// tolerance), which sits above central-difference truncation noise while
/// still catching sign and scale bugs.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `eval(params, want_grad)` must return the scalar value of a deterministic
/// function of `params` and, when asked, the gradient for each parameter in
/// the same order. Up to `samples_per_tensor` coordinates are sampled per
/// tensor (all of them for small tensors).
pub fn grad_check(
    params: &[(String, Tensor)],
    eval: &mut GradEval<'_>,
    step: f64,
    samples_per_tensor: usize,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    let (f0, grads) = eval(params, true)?;
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective {f0}")));
    }
    let grads = grads.ok_or_else(|| Error::Numeric("eval returned no gradients".into()))?;
    if grads.len() != params.len() {
        return Err(Error::Numeric(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<(String, Tensor)> = params.to_vec();

    for (ti, (name, tensor)) in params.iter().enumerate() {
        let len = tensor.len();
        let coords: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            // sample distinct coordinates
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < samples_per_tensor {
                seen.insert(rng.next_below(len));
            }
            seen.into_iter().collect()
        };

        for c in coords {
            let orig = tensor.data()[c];
            work[ti].1.data_mut()[c] = orig + step;
            let (f_plus, _) = eval(&work, false)?;
            work[ti].1.data_mut()[c] = orig - step;
            let (f_minus, _) = eval(&work, false)?;
            work[ti].1.data_mut()[c] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective while perturbing {name}[{c}]"
                )));
            }
            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = grads[ti].data()[c];
            let err = rel_err(ad, fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), c));
            }
        }
    }
    Ok(report)
}
