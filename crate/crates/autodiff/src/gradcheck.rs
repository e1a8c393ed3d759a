//! Central-difference validation of reverse-mode gradients.

use crate::error::AutodiffError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Leaf name and flat component index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub components_checked: usize,
    /// Every component at or over the tolerance.
    pub failures: Vec<ComponentError>,
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentError {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the tape gradient of `f` against `(f(x + h) - f(x - h)) / 2h` for
/// every component of every leaf.
///
/// `f` receives a fresh tape and one handle per leaf, in the order given, and
/// must return a scalar.
pub fn finite_difference_check<F, E>(
    f: F,
    leaves: &[(String, Tensor)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("step must be positive, got {step}"),
        }
        .into());
    }

    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| grads.get(v).cloned().expect("gradient for every leaf"))
            .collect::<Vec<_>>()
    };

    let eval = |values: &[Tensor], leaf: usize, index: usize| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.value(out);
        match y.item() {
            Some(v) if v.is_finite() && y.shape().is_empty() => Ok(v),
            Some(_) if y.shape().is_empty() => Err(AutodiffError::NonFinite {
                leaf: leaves[leaf].0.clone(),
                index,
            }
            .into()),
            _ => Err(AutodiffError::NonScalarOutput(y.shape().to_vec()).into()),
        }
    };

    let mut values: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        components_checked: 0,
        failures: Vec::new(),
        step,
        tolerance,
    };
    for leaf in 0..leaves.len() {
        for index in 0..values[leaf].numel() {
            let original = values[leaf].data()[index];
            values[leaf].data_mut()[index] = original + step;
            let plus = eval(&values, leaf, index)?;
            values[leaf].data_mut()[index] = original - step;
            let minus = eval(&values, leaf, index)?;
            values[leaf].data_mut()[index] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[leaf].data()[index];
            let err = relative_error(a, numeric);
            report.components_checked += 1;
            if !(err < tolerance) {
                report.failures.push(ComponentError {
                    leaf: leaves[leaf].0.clone(),
                    index,
                    analytic: a,
                    numeric,
                    relative_error: err,
                });
            }
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((leaves[leaf].0.clone(), index));
            }
        }
    }
    Ok(report)
}
