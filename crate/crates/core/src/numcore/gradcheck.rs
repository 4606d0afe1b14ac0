//! Central finite-difference oracle for tape gradients (check profile).

use super::{Module, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so that entries whose true
/// gradient is (numerically) zero are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn eval_scalar<M, F>(module: &M, loss: &mut F) -> Result<f64>
where
    F: FnMut(&M, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(module, &mut tape)?;
    match tape.value(l) {
        [v] => Ok(*v),
        other => Err(Error::contract(format!(
            "gradient check needs a scalar loss, got {} values",
            other.len()
        ))),
    }
}

/// Compares tape gradients of `loss` with respect to every parameter of
/// `module` against central differences with step `step`.
///
/// `loss` must be deterministic: any randomness (dropout masks, policy noise)
/// has to be re-seeded identically on every call.
pub fn check_module<M, F>(module: &mut M, step: f64, mut loss: F) -> Result<GradCheckReport>
where
    M: Module<f64>,
    F: FnMut(&M, &mut Tape<f64>) -> Result<Var>,
{
    module.zero_grad();
    let mut tape = Tape::new();
    let l = loss(module, &mut tape)?;
    let grads = tape.backward(l)?;
    module.accumulate(&grads)?;
    let names: Vec<String> = module.named_params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = module
        .params()
        .iter()
        .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    module.zero_grad();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (pi, name) in names.iter().enumerate() {
        for j in 0..analytic[pi].len() {
            let orig = module.params_mut()[pi].data()[j];
            module.params_mut()[pi].data_mut()[j] = orig + step;
            let up = eval_scalar(module, &mut loss)?;
            module.params_mut()[pi].data_mut()[j] = orig - step;
            let down = eval_scalar(module, &mut loss)?;
            module.params_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][j];
            let err = relative_error(a, numeric);
            report.merge(GradCheckReport {
                checked: 1,
                max_rel_err: err,
                worst: Some(Mismatch {
                    param: name.clone(),
                    index: j,
                    analytic: a,
                    numeric,
                }),
            });
        }
    }
    Ok(report)
}

/// Combines reports from several checks.
pub fn combine(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    let mut total = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for r in reports {
        total.merge(r);
    }
    total
}
