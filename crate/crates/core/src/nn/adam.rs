use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::param::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(like: &Matrix, config: AdamConfig) -> Self {
        Self {
            m: Matrix::zeros(like.rows(), like.cols()),
            v: Matrix::zeros(like.rows(), like.cols()),
            step: 0,
            config,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState) -> Result<()> {
    if state.m.shape() != param.value.shape() {
        return Err(Error::Dimension(format!(
            "adam state {:?} for parameter {} {:?}",
            state.m.shape(),
            param.name,
            param.value.shape()
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let values = param.value.data_mut();
    let grads = param.grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    param
        .value
        .ensure_finite(&format!("adam update of {}", param.name))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("w", Matrix::from_rows(&[&[v]]));
        p.grad.set(0, 0, g);
        p
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = scalar(0.7, 0.0);
        let mut s = AdamState::new(&p.value, AdamConfig::default());
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.value.get(0, 0), 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = -lr / (1 + eps).
        let mut p = scalar(0.0, 1.0);
        let mut s = AdamState::new(&p.value, AdamConfig::default());
        adam_step(&mut p, &mut s).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.value.get(0, 0) - expected).abs() < 1e-12);
        assert!((p.value.get(0, 0) + 0.001).abs() < 1e-6);
    }

    #[test]
    fn constant_grad_steps_do_not_grow() {
        // With a constant gradient m̂ and v̂ both equal g exactly; every step
        // is -lr·g/(|g|+eps). Hand-evaluate step 2 from the closed form.
        let mut p = scalar(0.0, 2.0);
        let mut s = AdamState::new(&p.value, AdamConfig::default());
        let mut prev = p.value.get(0, 0);
        let mut deltas = Vec::new();
        for _ in 0..3 {
            adam_step(&mut p, &mut s).unwrap();
            deltas.push((p.value.get(0, 0) - prev).abs());
            prev = p.value.get(0, 0);
        }
        let closed = 0.001 * 2.0 / (2.0 + 1e-8);
        for d in &deltas {
            assert!((d - closed).abs() < 1e-15);
        }
        assert!(deltas[1] <= deltas[0] + 1e-15 && deltas[2] <= deltas[1] + 1e-15);
    }

    #[test]
    fn shrinking_grad_shrinks_steps_after_first() {
        let mut p = scalar(0.0, 1.0);
        let mut s = AdamState::new(&p.value, AdamConfig::default());
        adam_step(&mut p, &mut s).unwrap();
        let d1 = p.value.get(0, 0).abs();
        p.grad.set(0, 0, 1.0);
        let before = p.value.get(0, 0);
        adam_step(&mut p, &mut s).unwrap();
        let d2 = (p.value.get(0, 0) - before).abs();
        assert!(d2 <= d1);
    }
}
