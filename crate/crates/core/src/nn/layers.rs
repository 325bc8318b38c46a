//! Dense layers, MLP stacks, and embedding tables with hand-written backward passes.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; forward passes return a
//! cache that the matching backward pass consumes. Backward passes accumulate
//! into the parameter gradients and return the gradient w.r.t. the input.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// `output = act(input · W + b)`, with `W` of shape `in × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Matrix,
    pub output: Matrix,
}

impl Dense {
    /// Registers a Xavier-initialised layer. `zero_init` gives an all-zero weight.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let mut w = Matrix::zeros(in_dim, out_dim);
        if !zero_init {
            let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for x in w.data_mut() {
                *x = dist.sample(rng);
            }
        }
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }

    pub fn forward(&self, store: &ParamStore, input: Matrix) -> Result<DenseCache> {
        let w = store.value(self.weight);
        let b = store.value(self.bias);
        if input.cols() != w.rows() {
            return Err(Error::Dimension(format!(
                "dense input has {} columns, weight has {} rows",
                input.cols(),
                w.rows()
            )));
        }
        let mut output = input.matmul(w)?;
        let bias = b.row(0);
        for r in 0..output.rows() {
            for (o, &bv) in output.row_mut(r).iter_mut().zip(bias) {
                *o = self.activation.apply(*o + bv);
            }
        }
        output.ensure_finite("dense forward")?;
        Ok(DenseCache { input, output })
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &DenseCache,
        grad_output: &Matrix,
    ) -> Result<Matrix> {
        cache.output.same_shape(grad_output, "dense backward")?;
        let mut grad_pre = grad_output.clone();
        if self.activation != Activation::Identity {
            for (g, &y) in grad_pre.data_mut().iter_mut().zip(cache.output.data()) {
                *g *= self.activation.derivative_from_output(y);
            }
        }
        cache
            .input
            .matmul_tn_acc(&grad_pre, store.grad_mut(self.weight))?;
        {
            let gb = store.grad_mut(self.bias);
            let gb = gb.row_mut(0);
            for r in 0..grad_pre.rows() {
                for (acc, &g) in gb.iter_mut().zip(grad_pre.row(r)) {
                    *acc += g;
                }
            }
        }
        grad_pre.matmul_nt(store.value(self.weight))
    }
}

/// A stack of dense layers. Hidden layers use ReLU, the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    caches: Vec<DenseCache>,
}

impl MlpCache {
    pub fn output(&self) -> &Matrix {
        &self.caches.last().expect("non-empty mlp").output
    }

    pub fn input(&self) -> &Matrix {
        &self.caches.first().expect("non-empty mlp").input
    }
}

impl Mlp {
    /// `sizes` lists every width from input to output, so it has at least two entries.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "mlp needs input and output widths");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let last = k + 1 == n;
                let act = if last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Dense::new(
                    store,
                    &format!("{name}.{k}"),
                    sizes[k],
                    sizes[k + 1],
                    act,
                    last && zero_last,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, store: &ParamStore, input: Matrix) -> Result<MlpCache> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            let cache = layer.forward(store, x)?;
            x = cache.output.clone();
            caches.push(cache);
        }
        Ok(MlpCache { caches })
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        grad_output: &Matrix,
    ) -> Result<Matrix> {
        let mut g = grad_output.clone();
        for (layer, c) in self.layers.iter().zip(&cache.caches).rev() {
            g = layer.backward(store, c, &g)?;
        }
        Ok(g)
    }
}

/// Lookup table whose row 0 is the reserved, always-zero padding row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = Matrix::zeros(vocab_size, dim);
        for r in 1..vocab_size {
            for x in w.row_mut(r) {
                let n: f64 = StandardNormal.sample(rng);
                *x = init_scale * n;
            }
        }
        let param = store.add(name, w);
        Self {
            param,
            vocab_size,
            dim,
        }
    }

    fn check(&self, indices: &[u32], drop_mask: &[bool]) -> Result<()> {
        if indices.len() != drop_mask.len() {
            return Err(Error::Dimension(format!(
                "{} indices with {} mask entries",
                indices.len(),
                drop_mask.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::Index {
                index: bad,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// One row per index; dropped or padding indices give zero rows.
    pub fn forward(
        &self,
        store: &ParamStore,
        indices: &[u32],
        drop_mask: &[bool],
    ) -> Result<Matrix> {
        let mut out = Matrix::zeros(indices.len(), self.dim);
        self.lookup_into(store, indices, drop_mask, &mut out, 0)?;
        Ok(out)
    }

    /// Writes looked-up rows into columns `col..col+dim` of `out`.
    pub fn lookup_into(
        &self,
        store: &ParamStore,
        indices: &[u32],
        drop_mask: &[bool],
        out: &mut Matrix,
        col: usize,
    ) -> Result<()> {
        self.check(indices, drop_mask)?;
        if out.rows() != indices.len() || col + self.dim > out.cols() {
            return Err(Error::Dimension("embedding output block".into()));
        }
        let w = store.value(self.param);
        for (r, (&idx, &dropped)) in indices.iter().zip(drop_mask).enumerate() {
            if dropped || idx == 0 {
                continue;
            }
            out.row_mut(r)[col..col + self.dim].copy_from_slice(w.row(idx as usize));
        }
        Ok(())
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        indices: &[u32],
        drop_mask: &[bool],
        grad_output: &Matrix,
    ) -> Result<()> {
        self.scatter_grad(store, indices, drop_mask, grad_output, 0)
    }

    /// Adds gradient rows from columns `col..col+dim` of `grad` into the table.
    pub fn scatter_grad(
        &self,
        store: &mut ParamStore,
        indices: &[u32],
        drop_mask: &[bool],
        grad: &Matrix,
        col: usize,
    ) -> Result<()> {
        self.check(indices, drop_mask)?;
        if grad.rows() != indices.len() || col + self.dim > grad.cols() {
            return Err(Error::Dimension("embedding gradient block".into()));
        }
        let g = store.grad_mut(self.param);
        for (r, (&idx, &dropped)) in indices.iter().zip(drop_mask).enumerate() {
            if dropped || idx == 0 {
                continue;
            }
            let src = &grad.row(r)[col..col + self.dim];
            for (acc, &v) in g.row_mut(idx as usize).iter_mut().zip(src) {
                *acc += v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam::AdamConfig;
    use crate::rng::substream;

    #[test]
    fn identity_layer_passes_input() {
        let mut store = ParamStore::new(AdamConfig::default());
        let weight = store.add("w", Matrix::identity(2));
        let bias = store.add("b", Matrix::zeros(1, 2));
        let layer = Dense {
            weight,
            bias,
            activation: Activation::Identity,
        };
        let out = layer
            .forward(&store, Matrix::from_rows(&[&[1.0, 2.0]]))
            .unwrap();
        assert_eq!(out.output.data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero() {
        let mut store = ParamStore::new(AdamConfig::default());
        let weight = store.add("w", Matrix::from_rows(&[&[1.0]]));
        let bias = store.add("b", Matrix::zeros(1, 1));
        let layer = Dense {
            weight,
            bias,
            activation: Activation::Sigmoid,
        };
        let out = layer
            .forward(&store, Matrix::from_rows(&[&[0.0]]))
            .unwrap();
        assert_eq!(out.output.data(), &[0.5]);
    }

    #[test]
    fn dense_rejects_bad_shape() {
        let mut store = ParamStore::new(AdamConfig::default());
        let mut rng = substream(1, &[]);
        let layer = Dense::new(&mut store, "d", 3, 2, Activation::Relu, false, &mut rng);
        assert!(matches!(
            layer.forward(&store, Matrix::zeros(1, 4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn padding_and_dropped_rows_are_zero() {
        let mut store = ParamStore::new(AdamConfig::default());
        let mut rng = substream(2, &[]);
        let table = EmbeddingTable::new(&mut store, "emb", 5, 3, 1.0, &mut rng);
        let out = table.forward(&store, &[0, 3, 3], &[false, true, false]).unwrap();
        assert_eq!(out.row(0), &[0.0; 3]);
        assert_eq!(out.row(1), &[0.0; 3]);
        assert_eq!(out.row(2), store.value(table.param).row(3));

        let grad = Matrix::from_rows(&[&[1.0; 3], &[2.0; 3], &[0.0; 3]]);
        table
            .backward(&mut store, &[0, 3, 3], &[false, true, false], &grad)
            .unwrap();
        let g = &store.get(table.param).grad;
        assert_eq!(g.row(0), &[0.0; 3]);
        assert_eq!(g.row(3), &[0.0; 3]);
    }

    #[test]
    fn duplicate_indices_accumulate() {
        let mut store = ParamStore::new(AdamConfig::default());
        let mut rng = substream(3, &[]);
        let table = EmbeddingTable::new(&mut store, "emb", 5, 2, 1.0, &mut rng);
        let grad = Matrix::from_rows(&[&[0.5, -1.0], &[0.25, 2.0]]);
        table
            .backward(&mut store, &[3, 3], &[false, false], &grad)
            .unwrap();
        assert_eq!(store.get(table.param).grad.row(3), &[0.75, 1.0]);
    }

    #[test]
    fn out_of_range_index() {
        let mut store = ParamStore::new(AdamConfig::default());
        let mut rng = substream(4, &[]);
        let table = EmbeddingTable::new(&mut store, "emb", 4, 2, 1.0, &mut rng);
        assert!(matches!(
            table.forward(&store, &[4], &[false]),
            Err(Error::Index { index: 4, vocab: 4 })
        ));
    }
}
