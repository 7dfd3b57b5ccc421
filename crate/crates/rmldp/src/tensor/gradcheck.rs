use super::{BoundParams, ParamSet, Tape, Var};
use crate::error::Result;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the analytic gradient of `f` against central finite differences,
/// coordinate by coordinate. `f` must be deterministic. Relative error is
/// |a - n| / max(1, |a|, |n|).
pub fn grad_check<F>(f: F, params: &ParamSet, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = bound.grads(&tape, &grads);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = BoundParams::bind(&mut t, p, false);
        let l = f(&mut t, &b)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    for (name, base) in params.iter() {
        let a = &analytic[name];
        for i in 0..base.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= step;
            let n = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let av = a.data()[i];
            let rel = (av - n).abs() / 1.0_f64.max(av.abs()).max(n.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.to_string();
                report.worst_index = i;
                report.analytic = av;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}
