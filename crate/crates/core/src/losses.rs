//! Objective terms. Every function returns the loss value together with its
//! gradient with respect to the inputs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{dot, Matrix};

pub const PROB_CLAMP: f64 = 1e-7;
/// Added to squared norms so the cosine of a zero latent stays smooth.
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub tau: f64,
    pub listwise: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tau: 0.1,
            listwise: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over rows and tasks; `probs[task][row]`.
/// The gradient is with respect to the probabilities and is zero where the clamp is active.
pub fn pred_loss_bce(probs: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if probs.len() != labels.len() || probs.iter().zip(labels).any(|(p, y)| p.len() != y.len()) {
        return Err(Error::Dimension("bce: probabilities and labels differ in shape".into()));
    }
    let count: usize = probs.iter().map(Vec::len).sum();
    if count == 0 {
        return Ok((0.0, probs.to_vec()));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(ps, ys)| {
            ps.iter()
                .zip(ys)
                .map(|(&p, &y)| {
                    let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    let active = q == p;
                    if y == 1 {
                        loss -= q.ln();
                        if active { -scale / q } else { 0.0 }
                    } else {
                        loss -= (1.0 - q).ln();
                        if active { scale / (1.0 - q) } else { 0.0 }
                    }
                })
                .collect()
        })
        .collect();
    Ok((loss * scale, grad))
}

/// Converts probability gradients into logit gradients through the sigmoid.
pub fn sigmoid_backward(probs: &[Vec<f64>], grad_probs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    probs
        .iter()
        .zip(grad_probs)
        .map(|(ps, gs)| ps.iter().zip(gs).map(|(&p, &g)| g * p * (1.0 - p)).collect())
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Rows grouped by session id, in ascending id order.
pub fn sessions(group_ids: &[u64]) -> BTreeMap<u64, Vec<usize>> {
    let mut m: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (r, &g) in group_ids.iter().enumerate() {
        m.entry(g).or_default().push(r);
    }
    m
}

/// Top-one ListNet cross entropy, averaged over sessions with at least two
/// rows and one positive. Returns the gradient with respect to `scores`.
pub fn listnet_loss(scores: &[f64], labels: &[u8], group_ids: &[u64]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() || scores.len() != group_ids.len() {
        return Err(Error::Dimension("listnet: scores, labels and groups differ in length".into()));
    }
    let qualifying: Vec<Vec<usize>> = sessions(group_ids)
        .into_values()
        .filter(|rows| rows.len() >= 2 && rows.iter().any(|&r| labels[r] != 0))
        .collect();
    let mut grad = vec![0.0; scores.len()];
    if qualifying.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / qualifying.len() as f64;
    let mut loss = 0.0;
    for rows in &qualifying {
        let y: Vec<f64> = rows.iter().map(|&r| f64::from(labels[r])).collect();
        let s: Vec<f64> = rows.iter().map(|&r| scores[r]).collect();
        let (py, ps) = (softmax(&y), softmax(&s));
        loss -= py.iter().zip(&ps).map(|(a, b)| a * b.ln()).sum::<f64>();
        for (k, &r) in rows.iter().enumerate() {
            grad[r] = scale * (ps[k] - py[k]);
        }
    }
    Ok((loss * scale, grad))
}

/// Listwise loss on raw label vectors; used to test the shift-invariance case.
pub fn listnet_session(scores: &[f64], targets: &[f64]) -> f64 {
    let (py, ps) = (softmax(targets), softmax(scores));
    -py.iter().zip(&ps).map(|(a, b)| a * b.ln()).sum::<f64>()
}

/// Mean squared error over views, rows and coordinates for one side.
pub fn recon_side(xhat: &[Matrix], target: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    if xhat.len() != target.len() {
        return Err(Error::Dimension("recon: view counts differ".into()));
    }
    let count: usize = xhat.iter().map(|m| m.data().len()).sum();
    let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(xhat.len());
    for (x, e) in xhat.iter().zip(target) {
        x.same_shape(e, "recon")?;
        let mut g = x.clone();
        for (gv, &ev) in g.data_mut().iter_mut().zip(e.data()) {
            let r = *gv - ev;
            loss += r * r;
            *gv = 2.0 * scale * r;
        }
        grads.push(g);
    }
    Ok((loss * scale, grads))
}

/// Reconstruction loss summed over the user and item sides.
pub fn recon_loss(
    xhat_u: &[Matrix],
    e_u: &[Matrix],
    xhat_i: &[Matrix],
    e_i: &[Matrix],
) -> Result<(f64, [Vec<Matrix>; 2])> {
    let (lu, gu) = recon_side(xhat_u, e_u)?;
    let (li, gi) = recon_side(xhat_i, e_i)?;
    Ok((lu + li, [gu, gi]))
}

/// Per-sample mean over views; treated as a constant by [`prior_side`].
pub fn view_mean(z: &[Matrix]) -> Result<Matrix> {
    let first = z.first().ok_or_else(|| Error::Dimension("prior: no views".into()))?;
    let mut mean = Matrix::zeros(first.rows(), first.cols());
    for v in z {
        mean.add_assign(v)?;
    }
    mean.scale(1.0 / z.len() as f64);
    Ok(mean)
}

/// Mean over views, rows and coordinates of `(z^j − z̄)²` for one side.
pub fn prior_side(z: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    let mean = view_mean(z)?;
    let count = z.len() * mean.data().len();
    let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let mut loss = 0.0;
    let grads = z
        .iter()
        .map(|v| {
            let mut g = v.clone();
            for (gv, &m) in g.data_mut().iter_mut().zip(mean.data()) {
                let r = *gv - m;
                loss += r * r;
                *gv = 2.0 * scale * r;
            }
            g
        })
        .collect();
    Ok((loss * scale, grads))
}

pub fn prior_loss(z_u: &[Matrix], z_i: &[Matrix]) -> Result<(f64, [Vec<Matrix>; 2])> {
    let (lu, gu) = prior_side(z_u)?;
    let (li, gi) = prior_side(z_i)?;
    Ok((lu + li, [gu, gi]))
}

fn norm(v: &[f64]) -> f64 {
    (dot(v, v) + NORM_EPS).sqrt()
}

/// In-batch InfoNCE for one side: row `r` of `anchor` should match row `r`
/// of `positive` against every other row of `positive`. Mean over rows.
/// Returns `(loss, grad_anchor, grad_positive)`.
pub fn infonce_side(anchor: &Matrix, positive: &Matrix, tau: f64) -> Result<(f64, Matrix, Matrix)> {
    anchor.same_shape(positive, "infonce")?;
    let (n, d) = anchor.shape();
    if n < 2 {
        return Err(Error::Config("infonce needs a batch of at least 2".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let na: Vec<f64> = (0..n).map(|r| norm(anchor.row(r))).collect();
    let np: Vec<f64> = (0..n).map(|r| norm(positive.row(r))).collect();
    let mut cos = Matrix::zeros(n, n);
    for a in 0..n {
        for p in 0..n {
            cos.set(a, p, dot(anchor.row(a), positive.row(p)) / (na[a] * np[p]));
        }
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    // dL/dcos[a][p]
    let mut gcos = Matrix::zeros(n, n);
    for a in 0..n {
        let logits: Vec<f64> = cos.row(a).iter().map(|c| c / tau).collect();
        let p = softmax(&logits);
        loss -= p[a].ln();
        for (k, &pk) in p.iter().enumerate() {
            let target = if k == a { 1.0 } else { 0.0 };
            gcos.set(a, k, scale * (pk - target) / tau);
        }
    }
    let mut ga = Matrix::zeros(n, d);
    let mut gp = Matrix::zeros(n, d);
    for a in 0..n {
        for p in 0..n {
            let g = gcos.get(a, p);
            if g == 0.0 {
                continue;
            }
            let c = cos.get(a, p);
            let (ar, pr) = (anchor.row(a), positive.row(p));
            for k in 0..d {
                let da = (pr[k] / np[p] - c * ar[k] / na[a]) / na[a];
                let dp = (ar[k] / na[a] - c * pr[k] / np[p]) / np[p];
                ga.data_mut()[a * d + k] += g * da;
                gp.data_mut()[p * d + k] += g * dp;
            }
        }
    }
    Ok((loss * scale, ga, gp))
}

/// `L_pred (+ L_listnet) + α·(L_recon + L_prior)`.
pub fn total_loss(pred: f64, listnet: f64, recon: f64, prior: f64, weights: &LossWeights) -> f64 {
    let listnet = if weights.listwise { listnet } else { 0.0 };
    pred + listnet + weights.alpha * (recon + prior)
}

/// Differential entropy of a `d`-dimensional unit-variance Gaussian.
pub fn gaussian_entropy(d: usize) -> f64 {
    0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln())
}
