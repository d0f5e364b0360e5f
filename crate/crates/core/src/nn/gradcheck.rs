//! Central-difference verification of analytic gradients.

use super::param::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Worst relative error for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient produced by `loss_fn` with central
/// differences `(L(θ+eps) - L(θ-eps)) / 2eps` for every entry of every
/// parameter.
///
/// `loss_fn` must return the loss and add its gradient into the store's
/// accumulators; the accumulators are zeroed before each call.
pub fn check_gradient<F>(store: &mut ParamStore, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("gradient check eps must be positive, got {eps}")));
    }
    store.zero_grad();
    let first = loss_fn(store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grad();
    let second = loss_fn(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, grads) in ids.into_iter().zip(analytic) {
        let mut worst: f64 = 0.0;
        for (i, a) in grads.iter().enumerate() {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let plus = loss_fn(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let minus = loss_fn(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(*a, numeric));
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_relative_error: worst,
            entries: grads.len(),
        });
    }
    store.zero_grad();
    Ok(GradCheckReport { params })
}
