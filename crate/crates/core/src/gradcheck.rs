//! Central-difference verification of parameter gradients.

use std::collections::BTreeSet;

use crate::error::Result;
use crate::numerics::Var;
use crate::params::{ParamStore, Session};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// Relative error floored at 1e-4 so zero gradients compare on an
    /// absolute scale.
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-4)
    }
}

/// Compares backprop gradients of the scalar `loss` against central
/// differences at the given `(parameter, flat index)` entries.
pub fn check_params<F>(store: &ParamStore, trainable: &BTreeSet<String>, entries: &[(String, usize)], loss: F) -> Result<Vec<GradProbe>>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut sess = Session::new(store, trainable);
    let out = loss(&mut sess)?;
    sess.tape.backward(out)?;
    let grads = sess.grads();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut sess = Session::inference(s);
        let out = loss(&mut sess)?;
        Ok(sess.tape.value(out).data()[0])
    };
    let mut probes = Vec::with_capacity(entries.len());
    let mut work = store.clone();
    for (name, index) in entries {
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[*index]);
        let orig = work.get(name)?.data()[*index];
        work.get_mut(name)?.data_mut()[*index] = orig + FD_STEP;
        let plus = eval(&work)?;
        work.get_mut(name)?.data_mut()[*index] = orig - FD_STEP;
        let minus = eval(&work)?;
        work.get_mut(name)?.data_mut()[*index] = orig;
        probes.push(GradProbe {
            name: name.clone(),
            index: *index,
            analytic,
            numeric: (plus - minus) / (2.0 * FD_STEP),
        });
    }
    Ok(probes)
}

/// Every entry of every named parameter.
pub fn all_entries(store: &ParamStore, names: &BTreeSet<String>) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for n in names {
        out.extend((0..store.get(n)?.len()).map(|i| (n.clone(), i)));
    }
    Ok(out)
}
