//! Twin-tower model: per-side embedding + encoder towers producing latent
//! means, per-side decoders reconstructing the embedded input, and a
//! dot-product predictor with one bias per task.

use rand_distr::{Distribution, StandardNormal};

use crate::config::KvConfig;
use crate::dataset::{FeatureSchema, SampleBatch, Side, SideFeatures};
use crate::error::{Error, Result};
use crate::nn::{dot, sigmoid, AdamConfig, EmbeddingTable, Matrix, Mlp, MlpCache, ParamId, ParamStore};
use crate::rng::{domain, substream, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TowerConfig {
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub d_z: usize,
    pub decoder_hidden: Vec<usize>,
    /// Standard deviation of the initial embedding rows.
    pub init_scale: f64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            encoder_hidden: vec![32],
            d_z: 8,
            decoder_hidden: vec![32],
            init_scale: 0.1,
        }
    }
}

fn sizes_to_string(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_sizes(s: &str, key: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: bad layer size {x:?}")))
        })
        .collect()
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.d_z == 0 {
            return Err(Error::Config("embed_dim and d_z must be positive".into()));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&h| h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, c: &mut KvConfig, prefix: &str) {
        c.set(&format!("{prefix}embed_dim"), self.embed_dim);
        c.set(&format!("{prefix}encoder_hidden"), sizes_to_string(&self.encoder_hidden));
        c.set(&format!("{prefix}d_z"), self.d_z);
        c.set(&format!("{prefix}decoder_hidden"), sizes_to_string(&self.decoder_hidden));
        c.set(&format!("{prefix}init_scale"), self.init_scale);
    }

    pub fn read_kv(c: &KvConfig, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let sizes = |key: &str, default: Vec<usize>| -> Result<Vec<usize>> {
            let k = format!("{prefix}{key}");
            c.get_str(&k).map_or(Ok(default), |s| parse_sizes(s, &k))
        };
        let cfg = Self {
            embed_dim: c.get_or(&format!("{prefix}embed_dim"), d.embed_dim)?,
            encoder_hidden: sizes("encoder_hidden", d.encoder_hidden)?,
            d_z: c.get_or(&format!("{prefix}d_z"), d.d_z)?,
            decoder_hidden: sizes("decoder_hidden", d.decoder_hidden)?,
            init_scale: c.get_or(&format!("{prefix}init_scale"), d.init_scale)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One side's embedding tables, encoder, and decoder.
#[derive(Debug, Clone)]
pub struct Tower {
    pub side: Side,
    pub features: SideFeatures,
    pub stat: Vec<EmbeddingTable>,
    pub seq: Vec<EmbeddingTable>,
    pub cate: Vec<EmbeddingTable>,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub input_dim: usize,
    embed_dim: usize,
}

/// Output of [`TwinTower::encode`]: the embedded input `e`, the latent mean, and the encoder cache.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub e: Matrix,
    pub mu: Matrix,
    cache: MlpCache,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub xhat: Matrix,
    cache: MlpCache,
}

/// Reparameterized sample `z = mu + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Matrix,
    pub eps: Matrix,
}

/// `z = mu + ε`, `ε ~ N(0, I)`; the posterior variance is fixed to the identity.
pub fn sample_latent(mu: &Matrix, rng: &mut Rng) -> LatentSample {
    let mut eps = Matrix::zeros(mu.rows(), mu.cols());
    for x in eps.data_mut() {
        *x = StandardNormal.sample(rng);
    }
    latent_with_noise(mu, eps)
}

pub fn latent_with_noise(mu: &Matrix, eps: Matrix) -> LatentSample {
    let mut z = mu.clone();
    z.add_assign(&eps).expect("same shape");
    LatentSample { z, eps }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `logits[task][row]`.
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TwinTower {
    pub schema: FeatureSchema,
    pub config: TowerConfig,
    pub store: ParamStore,
    pub user: Tower,
    pub item: Tower,
    /// `1 × n_tasks` logit offsets.
    pub task_bias: ParamId,
}

impl Tower {
    fn new(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        side: Side,
        config: &TowerConfig,
        rng: &mut Rng,
    ) -> Self {
        let features = schema.side(side);
        let dim = config.embed_dim;
        let p = match side {
            Side::User => "user",
            Side::Item => "item",
        };
        let stat = features
            .stat
            .iter()
            .map(|&k| {
                let f = &schema.stat[k];
                EmbeddingTable::new(store, &format!("{p}.emb.{}", f.name), f.n_buckets as usize + 1, dim, config.init_scale, rng)
            })
            .collect();
        let seq = features
            .seq
            .iter()
            .map(|&k| {
                let f = &schema.seq[k];
                EmbeddingTable::new(store, &format!("{p}.emb.{}", f.name), f.vocab_size as usize, dim, config.init_scale, rng)
            })
            .collect();
        let cate = features
            .cate
            .iter()
            .map(|&k| {
                let f = &schema.cate[k];
                EmbeddingTable::new(store, &format!("{p}.emb.{}", f.name), f.vocab_size as usize, dim, config.init_scale, rng)
            })
            .collect();
        let input_dim = features.len() * dim;
        let mut enc_sizes = vec![input_dim];
        enc_sizes.extend(&config.encoder_hidden);
        enc_sizes.push(config.d_z);
        let encoder = Mlp::new(store, &format!("{p}.encoder"), &enc_sizes, false, rng);
        let mut dec_sizes = vec![config.d_z];
        dec_sizes.extend(&config.decoder_hidden);
        dec_sizes.push(input_dim);
        let decoder = Mlp::new(store, &format!("{p}.decoder"), &dec_sizes, true, rng);
        Self {
            side,
            features,
            stat,
            seq,
            cate,
            encoder,
            decoder,
            input_dim,
            embed_dim: dim,
        }
    }

    /// Concatenated stat, pooled-sequence, and categorical embeddings.
    pub fn embed(&self, store: &ParamStore, batch: &SampleBatch) -> Result<Matrix> {
        let n = batch.len();
        let d = self.embed_dim;
        let mut e = Matrix::zeros(n, self.input_dim);
        let keep = vec![false; n];
        let mut col = 0;
        for (table, &k) in self.stat.iter().zip(&self.features.stat) {
            table.lookup_into(store, &batch.stat[k], &keep, &mut e, col)?;
            col += d;
        }
        for (table, &k) in self.seq.iter().zip(&self.features.seq) {
            let c = &batch.seq[k];
            if let Some(&bad) = c.ids.iter().find(|&&i| i as usize >= table.vocab_size) {
                return Err(Error::Index {
                    index: bad,
                    vocab: table.vocab_size,
                });
            }
            let w = store.value(table.param);
            for r in 0..n {
                let ids = c.row(r);
                let count = ids.iter().filter(|&&i| i != 0).count();
                if count == 0 {
                    continue;
                }
                let scale = 1.0 / count as f64;
                let out = &mut e.row_mut(r)[col..col + d];
                for &id in ids.iter().filter(|&&i| i != 0) {
                    for (o, &x) in out.iter_mut().zip(w.row(id as usize)) {
                        *o += scale * x;
                    }
                }
            }
            col += d;
        }
        for (table, &k) in self.cate.iter().zip(&self.features.cate) {
            table.lookup_into(store, &batch.cate[k], &batch.cate_drop[k], &mut e, col)?;
            col += d;
        }
        Ok(e)
    }

    pub fn embed_backward(&self, store: &mut ParamStore, batch: &SampleBatch, grad_e: &Matrix) -> Result<()> {
        let n = batch.len();
        let d = self.embed_dim;
        let keep = vec![false; n];
        let mut col = 0;
        for (table, &k) in self.stat.iter().zip(&self.features.stat) {
            table.scatter_grad(store, &batch.stat[k], &keep, grad_e, col)?;
            col += d;
        }
        for (table, &k) in self.seq.iter().zip(&self.features.seq) {
            let c = &batch.seq[k];
            let g = store.grad_mut(table.param);
            for r in 0..n {
                let ids = c.row(r);
                let count = ids.iter().filter(|&&i| i != 0).count();
                if count == 0 {
                    continue;
                }
                let scale = 1.0 / count as f64;
                let src = &grad_e.row(r)[col..col + d];
                for &id in ids.iter().filter(|&&i| i != 0) {
                    for (acc, &x) in g.row_mut(id as usize).iter_mut().zip(src) {
                        *acc += scale * x;
                    }
                }
            }
            col += d;
        }
        for (table, &k) in self.cate.iter().zip(&self.features.cate) {
            table.scatter_grad(store, &batch.cate[k], &batch.cate_drop[k], grad_e, col)?;
            col += d;
        }
        Ok(())
    }

    /// All embedding tables of this tower.
    pub fn tables(&self) -> impl Iterator<Item = &EmbeddingTable> {
        self.stat.iter().chain(&self.seq).chain(&self.cate)
    }
}

impl TwinTower {
    pub fn new(schema: &FeatureSchema, config: &TowerConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        let mut rng = substream(seed, &[domain::INIT]);
        let mut store = ParamStore::new(adam);
        let user = Tower::new(&mut store, schema, Side::User, config, &mut rng);
        let item = Tower::new(&mut store, schema, Side::Item, config, &mut rng);
        let task_bias = store.add("predictor.task_bias", Matrix::zeros(1, schema.n_tasks));
        Ok(Self {
            schema: schema.clone(),
            config: config.clone(),
            store,
            user,
            item,
            task_bias,
        })
    }

    pub fn tower(&self, side: Side) -> &Tower {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }

    pub fn encode(&self, side: Side, batch: &SampleBatch) -> Result<Encoded> {
        let tower = self.tower(side);
        let e = tower.embed(&self.store, batch)?;
        let cache = tower.encoder.forward(&self.store, e.clone())?;
        Ok(Encoded {
            mu: cache.output().clone(),
            e,
            cache,
        })
    }

    /// Backpropagates `grad_mu` through the encoder into the embedding tables.
    pub fn encode_backward(&mut self, side: Side, batch: &SampleBatch, enc: &Encoded, grad_mu: &Matrix) -> Result<()> {
        let tower = match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        };
        let grad_e = tower.encoder.backward(&mut self.store, &enc.cache, grad_mu)?;
        tower.embed_backward(&mut self.store, batch, &grad_e)
    }

    pub fn decode(&self, side: Side, z: &Matrix) -> Result<Decoded> {
        if z.cols() != self.config.d_z {
            return Err(Error::Dimension(format!(
                "decoder expects {} latent columns, got {}",
                self.config.d_z,
                z.cols()
            )));
        }
        let cache = self.tower(side).decoder.forward(&self.store, z.clone())?;
        Ok(Decoded {
            xhat: cache.output().clone(),
            cache,
        })
    }

    /// Returns the gradient with respect to `z`.
    pub fn decode_backward(&mut self, side: Side, dec: &Decoded, grad_xhat: &Matrix) -> Result<Matrix> {
        let tower = match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        };
        tower.decoder.backward(&mut self.store, &dec.cache, grad_xhat)
    }

    /// `sigmoid(mu_u·mu_i + bias_task)` for every task.
    pub fn predict(&self, mu_u: &Matrix, mu_i: &Matrix) -> Result<Prediction> {
        mu_u.same_shape(mu_i, "predict")?;
        let bias = self.store.value(self.task_bias).row(0);
        let dots: Vec<f64> = (0..mu_u.rows()).map(|r| dot(mu_u.row(r), mu_i.row(r))).collect();
        let logits: Vec<Vec<f64>> = bias.iter().map(|&b| dots.iter().map(|d| d + b).collect()).collect();
        let probs = logits.iter().map(|l| l.iter().map(|&x| sigmoid(x)).collect()).collect();
        Ok(Prediction { logits, probs })
    }

    /// Backpropagates logit gradients into the task biases; returns `(grad_mu_u, grad_mu_i)`.
    pub fn predict_backward(&mut self, mu_u: &Matrix, mu_i: &Matrix, grad_logits: &[Vec<f64>]) -> Result<(Matrix, Matrix)> {
        let (n, d) = mu_u.shape();
        let mut gu = Matrix::zeros(n, d);
        let mut gi = Matrix::zeros(n, d);
        {
            let gb = self.store.grad_mut(self.task_bias);
            for (t, g) in grad_logits.iter().enumerate() {
                gb.data_mut()[t] += g.iter().sum::<f64>();
            }
        }
        for r in 0..n {
            let g: f64 = grad_logits.iter().map(|gl| gl[r]).sum();
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                gu.data_mut()[r * d + c] = g * mu_i.get(r, c);
                gi.data_mut()[r * d + c] = g * mu_u.get(r, c);
            }
        }
        Ok((gu, gi))
    }

    /// Deterministic inference: encode both sides and predict from the means.
    pub fn infer(&self, batch: &SampleBatch) -> Result<Prediction> {
        let u = self.encode(Side::User, batch)?;
        let i = self.encode(Side::Item, batch)?;
        self.predict(&u.mu, &i.mu)
    }

    /// Hash of the schema plus tower shape; checkpoints are bound to it.
    pub fn schema_hash(&self) -> u64 {
        let mut h = self.schema.hash();
        let shape = format!(
            "{}|{}|{}|{}",
            self.config.embed_dim,
            sizes_to_string(&self.config.encoder_hidden),
            self.config.d_z,
            sizes_to_string(&self.config.decoder_hidden)
        );
        for b in shape.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}
