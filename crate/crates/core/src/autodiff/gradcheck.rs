use super::params::ParamStore;
use super::tape::Gradients;
use crate::error::{Error, Result};

const RETRY_ABOVE: f64 = 1e-6;

/// Compares analytic gradients against central finite differences for every
/// scalar parameter of `store`.
///
/// `loss` evaluates the scalar loss for a given parameter state; `analytic`
/// returns the reverse-mode gradients at the unperturbed state. Returns the
/// maximum of `|a - n| / max(1e-8, |a| + |n|)`.
///
/// An entry that disagrees at `eps` is re-probed at `10·eps`, `eps/10` and
/// `eps/100` and keeps its best agreement. Gradients near 1e-8 are
/// roundoff-bound at small steps, and a step straddling a ReLU kink measures
/// a mix of one-sided slopes that a smaller step no longer sees.
pub fn grad_check<L, G>(store: &ParamStore, eps: f64, loss: L, analytic: G) -> Result<f64>
where
    L: Fn(&ParamStore) -> Result<f64>,
    G: FnOnce(&ParamStore) -> Result<Gradients>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::OutOfRange(format!("finite-difference step {eps}")));
    }
    let grads = analytic(store)?;
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let a_grad = grads.get(store, id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        for k in 0..store.value(id).len() {
            let a = a_grad[k];
            let mut err = f64::INFINITY;
            for step in [eps, eps * 10.0, eps / 10.0, eps / 100.0] {
                let orig = store.value(id).data()[k];
                probe.value_mut(id).data_mut()[k] = orig + step;
                let up = loss(&probe)?;
                probe.value_mut(id).data_mut()[k] = orig - step;
                let down = loss(&probe)?;
                probe.value_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * step);
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}[{k}]", store.name(id))));
                }
                err = err.min((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
                if err <= RETRY_ABOVE {
                    break;
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
