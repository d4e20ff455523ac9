//! Central-difference gradient verification (64-bit only).

use crate::error::{config_err, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Below this magnitude gradients are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(param index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences of step `step`, elementwise over every parameter.
///
/// The error per element is `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return config_err("grad_check", format!("step {step} outside [1e-6, 1e-3]"));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::Contract(format!("grad_check needs a scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars = params.iter().map(|p| tape.leaf(p.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), checked: 0, tol };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(params[pi].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
            }
        }
    }
    Ok(report)
}
