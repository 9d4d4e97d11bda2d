//! Central finite-difference checks against tape gradients.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Floor on the denominator of the relative error, so that coordinates
/// whose true gradient is zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, err: f64) {
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `analytic[id]` with `(f(w + h) - f(w - h)) / 2h` for every
/// coordinate of every listed parameter, visiting at most `max_per_param`
/// evenly spaced coordinates per parameter.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &[Option<Tensor>],
    h: f64,
    max_per_param: usize,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let name = store.get(id).name.clone();
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = f(store);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = f(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic
                .get(id.index())
                .and_then(Option::as_ref)
                .map(|t| t.data()[i])
                .unwrap_or(0.0);
            report.record(&name, i, relative_error(a, numeric));
        }
    }
    report
}
