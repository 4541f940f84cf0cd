//! Central-difference gradient checking.

use super::array::Tensor;
use super::tape::{OpKind, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check: the worst coordinate and its error.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error used throughout: `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of scalar `f` at `inputs` with central
/// differences of step `h`; returns the maximum relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, h, None).map(|r| r.max_rel_error)
}

/// Like [`grad_check`], reporting the worst coordinate. `sign_flip`
/// deliberately corrupts one backward rule.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor], h: f64, sign_flip: Option<OpKind>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(k) = sign_flip {
        tape.inject_sign_flip(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, input: 0, index: 0, analytic: 0.0, numeric: 0.0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for idx in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[idx];
            work[which].data_mut()[idx] = x0 + h;
            let fp = eval(&work)?;
            work[which].data_mut()[idx] = x0 - h;
            let fm = eval(&work)?;
            work[which].data_mut()[idx] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[idx], numeric);
            if err > report.max_rel_error || (idx == 0 && which == 0) {
                report = GradCheckReport { max_rel_error: err, input: which, index: idx, analytic: analytic[idx], numeric };
            }
        }
    }
    Ok(report)
}
