//! Central finite-difference gradient checking.
//!
//! The check only evaluates forward values, so it is independent of the
//! reverse-mode rules it verifies.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::rng::rng_from_seed;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, element, analytic, numeric)` with the largest error.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a small absolute floor on the denominator so that
/// gradients that are zero on both routes compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients of `loss` against central differences on
/// `samples` randomly chosen scalar weights of `store`.
///
/// `loss` must bind `store` as trainable on the supplied tape and return the
/// scalar output together with the binding.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    mut loss: F,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<(Var, Bound)>,
{
    let mut tape = Tape::new();
    let (out, bound) = loss(store, &mut tape)?;
    let mut grads = tape.backward(out)?;
    let analytic = bound.grads(&mut grads, store);
    drop(tape);

    let ids: Vec<ParamId> = store.ids().collect();
    let total = store.num_scalars();
    let mut rng = rng_from_seed(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for _ in 0..samples {
        // Pick a scalar uniformly over all weights.
        let mut flat = rng.random_range(0..total);
        let mut pid = ids[0];
        for &id in &ids {
            let n = store.get(id).numel();
            if flat < n {
                pid = id;
                break;
            }
            flat -= n;
        }
        let orig = store.get(pid).data()[flat];
        let mut eval = |v: f64, store: &mut ParamStore| -> Result<f64> {
            store.get_mut(pid).data_mut()[flat] = v;
            let mut t = Tape::new();
            let (o, _) = loss(store, &mut t)?;
            Ok(t.value(o).item())
        };
        let plus = eval(orig + step, store)?;
        let minus = eval(orig - step, store)?;
        store.get_mut(pid).data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[pid.index()].data()[flat];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(pid).to_string(), flat, a, numeric));
        }
    }
    Ok(report)
}
