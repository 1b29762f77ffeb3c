//! Central finite-difference verification of tape gradients.

use super::matrix::Real;
use super::params::ParameterStore;
use super::tape::{Tape, Var};
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compare tape gradients of a scalar function against central differences
/// for every entry of every parameter.
///
/// The error per entry is `|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)`.
pub fn finite_difference_check<F>(
    f: F,
    params: &ParameterStore<f64>,
    eps: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var, NumericsError>,
{
    let eval = |store: &ParameterStore<f64>| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    let first = tape.scalar(root);
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second });
    }
    let grads = tape.backward(root)?;
    let analytic = tape.param_grads(&grads);

    let mut work = params.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_parameter: None, entries_checked: 0 };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic.get(&name).map_or(0.0, |g| g.data()[i].as_f64());
            let err = (ad - fd).abs() / f64::max(1.0, ad.abs() + fd.abs());
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst_parameter.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst_parameter = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
