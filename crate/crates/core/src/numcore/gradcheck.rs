use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::params::ParamStore;
use crate::numcore::scalar::Scalar;
use crate::numcore::tape::Gradients;
use crate::numcore::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient `(f(θ+h) − f(θ−h)) / 2h` for every entry of
/// every parameter. Only meaningful at 64-bit precision.
pub fn finite_diff_grad<T, F>(mut f: F, params: &ParamStore<T>, h: f64) -> Result<Gradients<T>>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    if T::BYTES < 8 {
        return Err(Error::Contract("finite differences require 64-bit precision".into()));
    }
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Contract(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::numel);
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let orig = params.get(&name).expect("name from store").data()[i];
            work.get_mut(&name).expect("cloned store").data_mut()[i] = orig + T::of(h);
            let plus = f(&work)?;
            work.get_mut(&name).expect("cloned store").data_mut()[i] = orig - T::of(h);
            let minus = f(&work)?;
            work.get_mut(&name).expect("cloned store").data_mut()[i] = orig;
            grad.push((plus - minus) / T::of(2.0 * h));
        }
        let shape = params.get(&name).expect("name from store").shape().to_vec();
        out.insert(name, Tensor::new(&shape, grad)?);
    }
    Ok(Gradients::new(out))
}

/// `|a − g| / max(|a|, |g|, 1e-8)`.
pub fn relative_error(a: f64, g: f64) -> f64 {
    (a - g).abs() / a.abs().max(g.abs()).max(1e-8)
}

/// Worst entry of a gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_err < tol
    }
}

pub fn compare_gradients<T: Scalar>(analytic: &Gradients<T>, numeric: &Gradients<T>) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        worst_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    for (name, a) in analytic.iter() {
        let g = numeric
            .get(name)
            .ok_or_else(|| Error::Contract(format!("numeric gradient missing {name}")))?;
        if a.shape() != g.shape() {
            return Err(Error::shape("compare_gradients", a.shape(), g.shape()));
        }
        for (i, (&x, &y)) in a.data().iter().zip(g.data()).enumerate() {
            let e = relative_error(x.f64(), y.f64());
            report.entries += 1;
            if e > report.worst_rel_err || report.worst_param.is_empty() {
                report = GradCheckReport {
                    worst_rel_err: e,
                    worst_param: name.clone(),
                    worst_index: i,
                    analytic: x.f64(),
                    numeric: y.f64(),
                    entries: report.entries,
                };
            }
        }
    }
    Ok(report)
}
