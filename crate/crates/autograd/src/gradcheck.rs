//! Central finite-difference checks of analytic gradients.

use ndarray::ArrayD;

use crate::grad::grad;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen, over all checked entries.
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares autodiff gradients of the scalar `f` against central differences.
///
/// Entries are compared with `|a - n| / max(|a|, |n|, floor)`. When an input
/// has more than `max_per_input` elements an evenly spaced subset is probed.
pub fn check_gradients(
    inputs: &[ArrayD<f64>],
    f: impl Fn(&[Tensor]) -> Tensor,
    eps: f64,
    floor: f64,
    max_per_input: usize,
) -> GradCheckReport {
    let leaves: Vec<Tensor> = inputs.iter().map(|a| Tensor::param(a.clone())).collect();
    let out = f(&leaves);
    assert_eq!(out.len(), 1, "gradient check needs a scalar function");
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let analytic = grad(&out, &refs, false);
    drop(out);

    let eval = |values: &[ArrayD<f64>]| -> f64 {
        // Leaves stay differentiable so functions that take inner gradients still work.
        let ts: Vec<Tensor> = values.iter().map(|v| Tensor::param(v.clone())).collect();
        f(&ts).item()
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut values: Vec<ArrayD<f64>> = inputs.iter().map(|a| a.as_standard_layout().into_owned()).collect();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        let analytic_flat: Vec<f64> = analytic[i].value().iter().copied().collect();
        let input_flat: Vec<f64> = input.iter().copied().collect();
        for k in (0..n).step_by(stride) {
            let orig = input_flat[k];
            set_flat(&mut values[i], k, orig + eps);
            let plus = eval(&values);
            set_flat(&mut values[i], k, orig - eps);
            let minus = eval(&values);
            set_flat(&mut values[i], k, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic_flat[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (i, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

fn set_flat(a: &mut ArrayD<f64>, k: usize, v: f64) {
    match a.as_slice_mut() {
        Some(s) => s[k] = v,
        None => *a.iter_mut().nth(k).unwrap() = v,
    }
}
