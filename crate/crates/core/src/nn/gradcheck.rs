//! Central finite-difference verification of analytic gradients.

use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateError>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coordinates
            .iter()
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.coordinates.iter().all(|c| c.rel_error <= self.tol)
    }

    pub fn worst(&self) -> Option<&CoordinateError> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Per-parameter maximum relative error.
    pub fn per_param(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.coordinates {
            match out.last_mut() {
                Some((name, worst)) if *name == c.param => *worst = worst.max(c.rel_error),
                _ => out.push((c.param.clone(), c.rel_error)),
            }
        }
        out
    }
}

/// Gradients below this magnitude are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Difference formula used by [`finite_diff_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    #[default]
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`; for losses with
    /// sharp curvature, at the price of slightly more rounding noise.
    Central4,
}

/// Compares analytic gradients against central differences.
///
/// `loss_and_grad` must compute the loss and accumulate its gradient into the
/// store; it is called with zeroed gradients and must be deterministic.
/// Padding rows (never touched by the loss) compare 0 against 0 and pass.
pub fn finite_diff_check<F>(store: &mut ParamStore, loss_and_grad: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    finite_diff_check_with(store, loss_and_grad, h, tol, Stencil::Central)
}

pub fn finite_diff_check_with<F>(
    store: &mut ParamStore,
    mut loss_and_grad: F,
    h: f64,
    tol: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grads();
    let base = loss_and_grad(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric("loss at base point".into()));
    }
    let analytic: Vec<Vec<f64>> = store
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();

    let mut coordinates = Vec::new();
    for pi in 0..store.len() {
        let n = store.params()[pi].value.data().len();
        for k in 0..n {
            let orig = store.params()[pi].value.data()[k];

            let mut at = |x: f64| -> Result<f64> {
                store.params_mut()[pi].value.data_mut()[k] = x;
                store.zero_grads();
                loss_and_grad(store)
            };
            let f = match stencil {
                Stencil::Central => vec![at(orig + h)?, at(orig - h)?],
                Stencil::Central4 => vec![at(orig + 2.0 * h)?, at(orig + h)?, at(orig - h)?, at(orig - 2.0 * h)?],
            };
            store.params_mut()[pi].value.data_mut()[k] = orig;
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "loss while perturbing {}[{k}]",
                    store.params()[pi].name
                )));
            }
            let numeric = match stencil {
                Stencil::Central => (f[0] - f[1]) / (2.0 * h),
                Stencil::Central4 => (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h),
            };
            let a = analytic[pi][k];
            coordinates.push(CoordinateError {
                param: store.params()[pi].name.clone(),
                index: k,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }

    // Leave the store holding the analytic gradient at the base point.
    store.zero_grads();
    loss_and_grad(store)?;
    Ok(GradCheckReport { coordinates, tol })
}
