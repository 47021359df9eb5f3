//! Central finite differences and the comparison metric used to check the
//! tape's gradients. Uses only forward evaluations.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor2;

/// `(f(theta + h e_i) - f(theta - h e_i)) / 2h` for every scalar parameter.
pub fn central_difference(store: &ParamStore<f64>, mut f: impl FnMut(&ParamStore<f64>) -> f64, h: f64) -> Vec<Tensor2<f64>> {
    let mut work = store.clone();
    work.zero_grad();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let (r, c) = store.value(id).shape();
        let mut g = Tensor2::zeros(r, c);
        for k in 0..r * c {
            let orig = work.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + h;
            let plus = f(&work);
            work.value_mut(id).data_mut()[k] = orig - h;
            let minus = f(&work);
            work.value_mut(id).data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`; parameters without an
/// analytic gradient count as zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn compare(store: &ParamStore<f64>, numeric: &[Tensor2<f64>], floor: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    for (i, num) in numeric.iter().enumerate() {
        let id = ParamId(i);
        for (k, &n) in num.data().iter().enumerate() {
            let a = store.grad(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, n, floor);
            report.entries += 1;
            if err > report.max_relative_error || report.worst_param.is_empty() {
                report = GradCheckReport {
                    max_relative_error: err,
                    worst_param: store.name(id).to_string(),
                    worst_index: k,
                    analytic: a,
                    numeric: n,
                    entries: report.entries,
                };
            }
        }
    }
    report
}

pub fn max_relative_error(store: &ParamStore<f64>, numeric: &[Tensor2<f64>], floor: f64) -> f64 {
    compare(store, numeric, floor).max_relative_error
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_central_difference_is_exact() {
        let mut st = ParamStore::new();
        st.insert("x", Tensor2::from_vec(1, 2, vec![3.0, -1.0]).unwrap()).unwrap();
        let g = central_difference(&st, |s| s.value(ParamId(0)).data().iter().map(|x| x * x).sum(), 1e-3);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-9);
        assert!((g[0].data()[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(1e-12, 0.0, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
