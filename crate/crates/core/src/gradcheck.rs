//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares [`Graph::backward`] against `(f(θ+h) − f(θ−h)) / 2h` for every
/// scalar of every parameter the loss touches (or only `only`, if given).
pub fn check_gradients<F>(
    store: &ParamStore,
    step: f64,
    only: Option<&[ParamId]>,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let grads = {
        let mut g = Graph::new(store);
        let out = loss(&mut g);
        g.backward(out)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let out = loss(&mut g);
        g.scalar(out)
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .get(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i, a, numeric));
            }
        }
    }
    report
}
