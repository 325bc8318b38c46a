use super::adam::{AdamConfig, AdamState};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// A trainable value together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every parameter of a model plus one Adam state per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    adam: Vec<AdamState>,
    adam_config: AdamConfig,
}

impl ParamStore {
    pub fn new(adam_config: AdamConfig) -> Self {
        Self {
            params: Vec::new(),
            adam: Vec::new(),
            adam_config,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.adam.push(AdamState::new(&value, self.adam_config));
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].grad
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn adam_states(&self) -> &[AdamState] {
        &self.adam
    }

    pub fn adam_config(&self) -> AdamConfig {
        self.adam_config
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// One Adam update of every parameter from its current gradient.
    pub fn adam_step(&mut self) -> Result<()> {
        for (p, s) in self.params.iter_mut().zip(self.adam.iter_mut()) {
            super::adam::adam_step(p, s)?;
        }
        Ok(())
    }

    /// Replaces values and optimizer state from another store with the same layout.
    pub(crate) fn restore_from(
        &mut self,
        values: Vec<(String, Matrix)>,
        moments: Vec<(Matrix, Matrix, u64)>,
    ) -> Result<()> {
        if values.len() != self.params.len() || moments.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for ((p, s), ((name, value), (m, v, step))) in self
            .params
            .iter_mut()
            .zip(self.adam.iter_mut())
            .zip(values.into_iter().zip(moments))
        {
            if p.name != name {
                return Err(Error::Format(format!(
                    "parameter order mismatch: expected {}, found {name}",
                    p.name
                )));
            }
            if value.shape() != p.value.shape()
                || m.shape() != p.value.shape()
                || v.shape() != p.value.shape()
            {
                return Err(Error::Format(format!("shape mismatch for parameter {name}")));
            }
            p.value = value;
            p.zero_grad();
            s.m = m;
            s.v = v;
            s.step = step;
        }
        Ok(())
    }
}
