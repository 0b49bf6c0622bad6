//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates excluded because some relu input passed within `step`
    /// of its subgradient point during the perturbed evaluations.
    pub skipped: usize,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let skipped: usize = self.params.iter().map(|p| p.skipped).sum();
        format!(
            "gradcheck max rel err {:.3e} (tolerance {:.1e}, {} skipped): {}",
            self.max_rel_err,
            self.tolerance,
            skipped,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares tape gradients of `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` per parameter coordinate.
///
/// `f` receives a fresh tape plus one leaf per entry of `params` and must
/// return a scalar loss. The relative error for a coordinate is
/// `|a - n| / max(|a|, |n|)`, taken as zero when both magnitudes are below
/// 1e-8 (pure roundoff).
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        tape.set_kink_eps(step);
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.scalar(loss)?, tape.kink_hit()))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    tape.set_kink_eps(step);
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let base_kink = tape.kink_hit();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(&tape, v)).collect();

    let mut tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_err: 0.0,
        tolerance,
        passed: true,
    };

    for p in 0..params.len() {
        let mut check = ParamCheck {
            name: params[p].0.clone(),
            max_rel_err: 0.0,
            skipped: 0,
            checked: 0,
        };
        for i in 0..tensors[p].data.len() {
            let orig = tensors[p].data[i];
            tensors[p].data[i] = orig + step;
            let (f_plus, kink_plus) = eval(&tensors)?;
            tensors[p].data[i] = orig - step;
            let (f_minus, kink_minus) = eval(&tensors)?;
            tensors[p].data[i] = orig;

            if base_kink || kink_plus || kink_minus {
                check.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[p].data[i];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-8 {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            check.checked += 1;
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
            }
        }
        if check.max_rel_err > report.max_rel_err {
            report.max_rel_err = check.max_rel_err;
        }
        report.params.push(check);
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}
