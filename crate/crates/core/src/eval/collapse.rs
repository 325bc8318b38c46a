//! Diagnostics for loss of per-sample information in latents.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const PROBE_RIDGE: f64 = 1e-6;

/// Every `HOLDOUT_EVERY`-th sample is held out from probe fitting.
pub const HOLDOUT_EVERY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollapseReport {
    /// Mean over samples of the trace of the across-view latent variance.
    pub view_variance: f64,
    /// Trace of the latent covariance over all samples and views.
    pub total_variance: f64,
    /// Held-out MSE of the linear probe z → e, averaged over coordinates.
    pub probe_error: f64,
    /// Held-out variance of e about the training mean, averaged over coordinates.
    pub target_variance: f64,
}

impl CollapseReport {
    /// View variance as a fraction of total latent variance (scale-free).
    pub fn relative_view_variance(&self) -> f64 {
        self.view_variance / self.total_variance.max(1e-300)
    }

    /// Probe error as a fraction of the error of predicting the mean.
    pub fn relative_probe_error(&self) -> f64 {
        self.probe_error / self.target_variance.max(1e-300)
    }
}

/// Within-sample view variance and held-out ridge-probe error.
///
/// `views[j]` holds the latent of every sample under view `j` (n × d); `e` holds
/// each sample's embedded input (n × m). The probe is fit on all views of the
/// training samples, each paired with its sample's `e`.
pub fn collapse_probe(views: &[Matrix], e: &Matrix) -> Result<CollapseReport> {
    let j = views.len();
    if j < 2 {
        return Err(Error::Input("collapse probe needs at least 2 views".into()));
    }
    let (n, d) = views[0].shape();
    if views.iter().any(|v| v.shape() != (n, d)) || e.rows() != n {
        return Err(Error::Dimension("collapse probe view/target shapes".into()));
    }
    if n < HOLDOUT_EVERY {
        return Err(Error::Input(format!("collapse probe needs >= {HOLDOUT_EVERY} samples")));
    }

    let mut view_var = 0.0;
    let mut grand = vec![0.0; d];
    for i in 0..n {
        for c in 0..d {
            let mean = views.iter().map(|v| v.get(i, c)).sum::<f64>() / j as f64;
            view_var += views.iter().map(|v| (v.get(i, c) - mean).powi(2)).sum::<f64>() / j as f64;
            grand[c] += mean;
        }
    }
    view_var /= n as f64;
    for g in &mut grand {
        *g /= n as f64;
    }
    let total_var = views
        .iter()
        .flat_map(|v| (0..n).flat_map(move |i| (0..d).map(move |c| (i, c, v))))
        .map(|(i, c, v)| (v.get(i, c) - grand[c]).powi(2))
        .sum::<f64>()
        / (n * j) as f64;

    let held_out = |i: usize| i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1;
    let train: Vec<usize> = (0..n).filter(|&i| !held_out(i)).collect();
    let test: Vec<usize> = (0..n).filter(|&i| held_out(i)).collect();
    let m = e.cols();

    let design = |rows: &[usize]| {
        DMatrix::from_fn(rows.len() * j, d + 1, |r, c| {
            let (sample, view) = (rows[r / j], r % j);
            if c == d {
                1.0
            } else {
                views[view].get(sample, c)
            }
        })
    };
    let targets = |rows: &[usize]| DMatrix::from_fn(rows.len() * j, m, |r, c| e.get(rows[r / j], c));

    let x = design(&train);
    let y = targets(&train);
    let gram = x.transpose() * &x + DMatrix::identity(d + 1, d + 1) * PROBE_RIDGE;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("probe normal equations not positive definite".into()))?;
    let w = chol.solve(&(x.transpose() * &y));

    let resid = design(&test) * &w - targets(&test);
    let probe_error = resid.norm_squared() / (resid.nrows() * m) as f64;

    let train_mean: DVector<f64> = DVector::from_fn(m, |c, _| {
        train.iter().map(|&i| e.get(i, c)).sum::<f64>() / train.len() as f64
    });
    let target_var = test
        .iter()
        .map(|&i| (0..m).map(|c| (e.get(i, c) - train_mean[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (test.len() * m) as f64;

    Ok(CollapseReport {
        view_variance: view_var,
        total_variance: total_var,
        probe_error,
        target_variance: target_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_views_have_zero_view_variance() {
        let z = random(40, 3, 1);
        let e = random(40, 5, 2);
        let r = collapse_probe(&[z.clone(), z.clone(), z], &e).unwrap();
        assert_eq!(r.view_variance, 0.0);
        assert!(r.total_variance > 0.0);
    }

    #[test]
    fn identity_latent_is_recoverable() {
        let e = random(60, 4, 3);
        let r = collapse_probe(&[e.clone(), e.clone()], &e).unwrap();
        assert!(r.probe_error < 1e-10, "{}", r.probe_error);
    }

    #[test]
    fn constant_latent_probe_predicts_training_mean() {
        let e = random(80, 3, 4);
        let mut z = Matrix::zeros(80, 2);
        z.fill(0.7);
        let r = collapse_probe(&[z.clone(), z], &e).unwrap();
        // Closed form: with a constant design the ridge solution is the training mean
        // of e up to O(ridge) shrinkage.
        assert!((r.probe_error - r.target_variance).abs() < 1e-6 * r.target_variance);
        assert!((r.relative_probe_error() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn view_variance_matches_hand_value() {
        // One coordinate, two samples, views {0, 2} and {1, 1}: variances 1 and 0.
        let a = Matrix::from_rows(&[&[0.0], &[1.0], &[0.0], &[0.0]]);
        let b = Matrix::from_rows(&[&[2.0], &[1.0], &[0.0], &[0.0]]);
        let e = random(4, 1, 5);
        let r = collapse_probe(&[a, b], &e).unwrap();
        assert_eq!(r.view_variance, 0.25);
    }
}
