use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Largest relative error observed for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: BTreeMap<String, ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.values().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients to central finite differences.
///
/// Parameters with more than `max_per_param` elements are checked on an evenly
/// spaced subset of that size.
pub fn check_gradients<F>(build: F, store: &ParameterStore, eps: f64, max_per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(Tape, NodeId)>,
{
    let eval = |s: &ParameterStore| -> Result<f64> {
        let (tape, root) = build(s)?;
        Ok(tape.value(root).item())
    };
    let (tape, root) = build(store)?;
    let base = tape.value(root).item();
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::invalid("loss builder is not deterministic"));
    }
    let analytic = tape.backward(root, store)?;

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.len());
        let indices: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|k| k * n / max_per_param).collect()
        };
        let mut check = ParamCheck { max_rel_error: 0.0, checked: 0, worst_index: 0 };
        for &i in &indices {
            let orig = work.get(&name).unwrap().data()[i];
            work.value_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.value_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.value_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[&name].data()[i], numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
            check.checked += 1;
        }
        report.params.insert(name, check);
    }
    Ok(report)
}
