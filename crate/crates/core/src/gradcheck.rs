//! Gradient verification against central finite differences.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tape, Tensor};

pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: Real,
    /// Denominator floor for the relative error, so components whose true
    /// gradient is far below this floor are judged on absolute error.
    pub floor: Real,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5 as Real, floor: 1.0 }
    }
}

pub struct GradCheckReport {
    pub max_rel_err: Real,
    /// (parameter name, worst relative error within it)
    pub per_param: Vec<(String, Real)>,
}

/// Compares reverse-mode gradients of a scalar-valued function against
/// central finite differences over the listed parameters.
///
/// `f` must be deterministic given the parameter values (thread any
/// randomness through fixed constants before calling).
pub fn check_gradients<F>(
    params: &mut ParamSet,
    ids: &[ParamId],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamSet) -> Result<Tensor>,
{
    // Analytic pass.
    let analytic: Vec<Vec<Real>> = {
        let tape = Tape::new();
        let loss = f(&tape, params)?;
        let l = tape.scalar(loss)?;
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "check_gradients" });
        }
        tape.backward(loss)?;
        ids.iter()
            .map(|&id| tape.param_grad(id).unwrap_or_else(|| vec![0.0; params.value(id).len()]))
            .collect()
    };

    let eval = |params: &ParamSet| -> Result<Real> {
        let tape = Tape::new();
        let loss = f(&tape, params)?;
        tape.scalar(loss)
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, per_param: Vec::new() };
    for (pi, &id) in ids.iter().enumerate() {
        let n = params.value(id).len();
        let mut worst = 0.0 as Real;
        for i in 0..n {
            let orig = params.value(id)[i];
            params.value_mut(id)[i] = orig + opts.step;
            let up = eval(params)?;
            params.value_mut(id)[i] = orig - opts.step;
            let down = eval(params)?;
            params.value_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
        report.per_param.push((params.name(id).to_string(), worst));
        if worst > report.max_rel_err {
            report.max_rel_err = worst;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2], vec![1.0, 2.0]).unwrap();
        let report = check_gradients(&mut ps, &[x], &GradCheckOptions::default(), |t, ps| {
            let xv = t.param(ps, x)?;
            let sq = t.mul(xv, xv)?;
            t.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);

        // And the analytic gradient itself is [2, 4].
        let tape = Tape::new();
        let xv = tape.param(&ps, x).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.param_grad(x).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }
}
