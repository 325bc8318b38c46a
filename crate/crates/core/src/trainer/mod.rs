//! Objective assembly for the four training methods and the incremental
//! single-pass runner.

mod incremental;
mod runlog;

use std::fmt;
use std::str::FromStr;

pub use incremental::{
    check_future_blind, checkpoint_file, collapse_diagnostics, evaluate, train_incremental, train_on_spans,
    RunOutcome, SpanSource, TrainOptions, CHECKPOINT_DIR, FINAL_CHECKPOINT, RUNLOG_FILE,
    TIMING_FILE, TRAIN_CONFIG_FILE,
};
pub use runlog::{RunLog, RunRecord};

use crate::augment::{make_views, AugmentConfig};
use crate::config::KvConfig;
use crate::dataset::{SampleBatch, Side};
use crate::error::{Error, Result};
use crate::losses::{
    infonce_side, listnet_loss, pred_loss_bce, prior_side, recon_side, sigmoid_backward, total_loss,
    LossWeights,
};
use crate::model::{sample_latent, Encoded, TowerConfig, TwinTower};
use crate::nn::{AdamConfig, Matrix};
use crate::rng::{domain, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Erm,
    Aug,
    Infonce,
    ElboTds,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Erm, Method::Aug, Method::Infonce, Method::ElboTds];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Aug => "aug",
            Method::Infonce => "infonce",
            Method::ElboTds => "elbo_tds",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected erm, aug, infonce or elbo_tds)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    /// Augmentation settings; the seed is always taken from [`TrainConfig::seed`].
    pub augment: AugmentConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub seed: u64,
    pub eval_every_span: bool,
    pub tower: TowerConfig,
    /// Rows used by the collapse probe at each evaluation; 0 disables it.
    pub probe_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::ElboTds,
            batch_size: 128,
            augment: AugmentConfig::default(),
            weights: LossWeights::default(),
            lr: 3e-3,
            seed: 0,
            eval_every_span: true,
            tower: TowerConfig::default(),
            probe_rows: 4096,
        }
    }
}

const KEYS: &[&str] = &[
    "method",
    "batch_size",
    "lr",
    "seed",
    "eval_every_span",
    "probe_rows",
    "alpha",
    "tau",
    "listwise",
    "aug.r",
    "aug.p_seq",
    "aug.p_cate",
    "aug.p",
    "aug.j",
    "model.embed_dim",
    "model.encoder_hidden",
    "model.d_z",
    "model.decoder_hidden",
    "model.init_scale",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.weights.validate()?;
        self.tower.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.method == Method::Infonce && self.batch_size < 2 {
            return Err(Error::Config("infonce needs batch_size >= 2 for in-batch negatives".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Augmentation config carrying the run seed.
    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            seed: self.seed,
            ..self.augment.clone()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("method", self.method);
        c.set("batch_size", self.batch_size);
        c.set("lr", self.lr);
        c.set("seed", self.seed);
        c.set("eval_every_span", self.eval_every_span);
        c.set("probe_rows", self.probe_rows);
        c.set("alpha", self.weights.alpha);
        c.set("tau", self.weights.tau);
        c.set("listwise", self.weights.listwise);
        self.augment.write_kv(&mut c, "aug.");
        self.tower.write_kv(&mut c, "model.");
        c
    }

    /// Reads keys produced by [`Self::to_kv`]; absent keys keep their defaults.
    pub fn from_kv(c: &KvConfig) -> Result<Self> {
        c.ensure_known(KEYS, "train")?;
        let d = Self::default();
        let seed = c.get_or("seed", d.seed)?;
        let method = match c.get_str("method") {
            Some(m) => m.parse()?,
            None => d.method,
        };
        let cfg = Self {
            method,
            batch_size: c.get_or("batch_size", d.batch_size)?,
            augment: AugmentConfig::read_kv(c, "aug.", seed)?,
            weights: LossWeights {
                alpha: c.get_or("alpha", d.weights.alpha)?,
                tau: c.get_or("tau", d.weights.tau)?,
                listwise: c.get_or("listwise", d.weights.listwise)?,
            },
            lr: c.get_or("lr", d.lr)?,
            seed,
            eval_every_span: c.get_or("eval_every_span", d.eval_every_span)?,
            tower: TowerConfig::read_kv(c, "model.")?,
            probe_rows: c.get_or("probe_rows", d.probe_rows)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss components of one step. Terms a method does not use are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub pred: f64,
    pub listnet: f64,
    pub recon: f64,
    pub prior: f64,
    pub infonce: f64,
}

impl StepLosses {
    pub const NAMES: [&'static str; 6] = ["total", "pred", "listnet", "recon", "prior", "infonce"];

    pub fn values(&self) -> [f64; 6] {
        [self.total, self.pred, self.listnet, self.recon, self.prior, self.infonce]
    }
}

/// Detached reconstruction targets `[side][view]`.
pub type ReconTargets = [Vec<Matrix>; 2];

fn side_index(side: Side) -> usize {
    match side {
        Side::User => 0,
        Side::Item => 1,
    }
}

fn scaled(m: &Matrix, s: f64) -> Matrix {
    let mut out = m.clone();
    out.scale(s);
    out
}

/// Predictive loss on one batch. Gradients reach the task bias immediately;
/// the returned `grad_mu` (already multiplied by `scale`) is left for the caller
/// to push through the encoders.
fn predictive(
    model: &mut TwinTower,
    batch: &SampleBatch,
    weights: &LossWeights,
    scale: f64,
) -> Result<(f64, f64, [Encoded; 2], [Matrix; 2])> {
    let u = model.encode(Side::User, batch)?;
    let i = model.encode(Side::Item, batch)?;
    let p = model.predict(&u.mu, &i.mu)?;
    let (pred, gp) = pred_loss_bce(&p.probs, &batch.labels)?;
    let mut grad_logits = sigmoid_backward(&p.probs, &gp);
    let mut listnet = 0.0;
    if weights.listwise {
        let (l, g) = listnet_loss(&p.logits[0], &batch.labels[0], &batch.group_ids)?;
        listnet = l;
        for (a, b) in grad_logits[0].iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in grad_logits.iter_mut().flatten() {
        *g *= scale;
    }
    let (gu, gi) = model.predict_backward(&u.mu, &i.mu, &grad_logits)?;
    Ok((pred, listnet, [u, i], [gu, gi]))
}

fn encoders_backward(model: &mut TwinTower, batch: &SampleBatch, enc: &[Encoded; 2], grad: &[Matrix; 2]) -> Result<()> {
    for side in Side::BOTH {
        let s = side_index(side);
        model.encode_backward(side, batch, &enc[s], &grad[s])?;
    }
    Ok(())
}

/// Embedded inputs of every view, used as reconstruction targets.
pub fn recon_targets(model: &TwinTower, batch: &SampleBatch, config: &TrainConfig, batch_index: u64) -> Result<ReconTargets> {
    let views = make_views(&model.schema, batch, &config.augment_config(), batch_index)?;
    let mut out: ReconTargets = [Vec::new(), Vec::new()];
    for side in Side::BOTH {
        for v in &views.views {
            out[side_index(side)].push(model.tower(side).embed(&model.store, v)?);
        }
    }
    Ok(out)
}

/// Computes the method's loss and accumulates its gradient into the store
/// without zeroing or stepping. `targets` pins the reconstruction targets;
/// when absent they are the views' current embeddings.
pub fn accumulate_gradients(
    model: &mut TwinTower,
    batch: &SampleBatch,
    config: &TrainConfig,
    batch_index: u64,
    targets: Option<&ReconTargets>,
) -> Result<StepLosses> {
    let w = config.weights;
    let mut out = StepLosses::default();
    match config.method {
        Method::Erm => {
            let (pred, listnet, enc, g) = predictive(model, batch, &w, 1.0)?;
            encoders_backward(model, batch, &enc, &g)?;
            out.pred = pred;
            out.listnet = listnet;
            out.total = pred + listnet;
        }
        Method::Aug => {
            let views = make_views(&model.schema, batch, &config.augment_config(), batch_index)?;
            let s = 1.0 / (views.views.len() + 1) as f64;
            for b in std::iter::once(batch).chain(&views.views) {
                let (pred, listnet, enc, g) = predictive(model, b, &w, s)?;
                encoders_backward(model, b, &enc, &g)?;
                out.pred += s * pred;
                out.listnet += s * listnet;
            }
            out.total = out.pred + out.listnet;
        }
        Method::Infonce => {
            let (pred, listnet, enc, mut g) = predictive(model, batch, &w, 1.0)?;
            let views = make_views(&model.schema, batch, &config.augment_config(), batch_index)?;
            let j = views.views.len() as f64;
            let s = w.alpha / j;
            for side in Side::BOTH {
                let k = side_index(side);
                for v in &views.views {
                    let venc = model.encode(side, v)?;
                    let (l, ga, gp) = infonce_side(&enc[k].mu, &venc.mu, w.tau)?;
                    out.infonce += l / j;
                    g[k].add_assign(&scaled(&ga, s))?;
                    model.encode_backward(side, v, &venc, &scaled(&gp, s))?;
                }
            }
            encoders_backward(model, batch, &enc, &g)?;
            out.pred = pred;
            out.listnet = listnet;
            out.total = pred + listnet + w.alpha * out.infonce;
        }
        Method::ElboTds => {
            let (pred, listnet, enc, g) = predictive(model, batch, &w, 1.0)?;
            let views = make_views(&model.schema, batch, &config.augment_config(), batch_index)?;
            let span = u64::from(batch.span_id);
            for side in Side::BOTH {
                let k = side_index(side);
                let mut encs = Vec::with_capacity(views.views.len());
                let mut zs = Vec::with_capacity(views.views.len());
                let mut decs = Vec::with_capacity(views.views.len());
                for (j, v) in views.views.iter().enumerate() {
                    let e = model.encode(side, v)?;
                    let mut rng = substream(config.seed, &[domain::LATENT, span, batch_index, j as u64, k as u64]);
                    let z = sample_latent(&e.mu, &mut rng).z;
                    decs.push(model.decode(side, &z)?);
                    zs.push(z);
                    encs.push(e);
                }
                let xhat: Vec<Matrix> = decs.iter().map(|d| d.xhat.clone()).collect();
                let (recon, grec) = match targets {
                    Some(t) => recon_side(&xhat, &t[k])?,
                    None => recon_side(&xhat, &encs.iter().map(|e| e.e.clone()).collect::<Vec<_>>())?,
                };
                let (prior, gpri) = prior_side(&zs)?;
                out.recon += recon;
                out.prior += prior;
                for j in 0..views.views.len() {
                    let mut gz = model.decode_backward(side, &decs[j], &scaled(&grec[j], w.alpha))?;
                    gz.add_assign(&scaled(&gpri[j], w.alpha))?;
                    model.encode_backward(side, &views.views[j], &encs[j], &gz)?;
                }
            }
            encoders_backward(model, batch, &enc, &g)?;
            out.pred = pred;
            out.listnet = listnet;
            out.total = total_loss(pred, listnet, out.recon, out.prior, &w);
        }
    }
    Ok(out)
}

/// One optimizer update on `batch`. `step` is only used in error messages.
pub fn train_step(model: &mut TwinTower, batch: &SampleBatch, config: &TrainConfig, batch_index: u64, step: u64) -> Result<StepLosses> {
    model.store.zero_grads();
    let losses = accumulate_gradients(model, batch, config, batch_index, None)
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("step {step}: loss")));
    }
    if let Some(p) = model.store.params().iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Numeric(format!("step {step}: gradient of {}", p.name)));
    }
    model.store.adam_step().map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    })?;
    Ok(losses)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::full_batch;
    use crate::model::tests::{toy_config, toy_schema, toy_span};
    use crate::nn::{finite_diff_check_with, Stencil};

    pub(crate) fn toy_train_config(method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            batch_size: 4,
            augment: AugmentConfig {
                p: 0.5,
                ..AugmentConfig::default()
            },
            weights: LossWeights {
                alpha: 0.7,
                tau: 0.5,
                listwise: true,
            },
            lr: 1e-3,
            seed,
            tower: toy_config(),
            ..TrainConfig::default()
        }
    }

    fn toy(method: Method, seed: u64) -> (TwinTower, SampleBatch, TrainConfig) {
        let schema = toy_schema();
        let cfg = toy_train_config(method, seed);
        let model = TwinTower::new(&schema, &cfg.tower, cfg.adam(), seed).unwrap();
        let batch = full_batch(&schema, &toy_span(seed, 4));
        (model, batch, cfg)
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = TrainConfig {
            method: Method::Infonce,
            seed: 9,
            augment: AugmentConfig { seed: 9, ..AugmentConfig::default() },
            tower: TowerConfig {
                encoder_hidden: vec![16, 8],
                decoder_hidden: vec![],
                ..TowerConfig::default()
            },
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut kv = cfg.to_kv();
        kv.set("batch_size", 1);
        assert!(TrainConfig::from_kv(&kv).is_err());
        kv.set("batch_size", 8);
        kv.set("methd", "erm");
        assert!(TrainConfig::from_kv(&kv).is_err());
        assert!("sgd".parse::<Method>().is_err());
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }

    #[test]
    fn full_step_gradients_match_finite_differences() {
        for method in Method::ALL {
            let (mut model, batch, cfg) = toy(method, 3);
            let targets = recon_targets(&model, &batch, &cfg, 0).unwrap();
            let mut store = model.store.clone();
            let report = finite_diff_check_with(
                &mut store,
                |s| {
                    std::mem::swap(&mut model.store, s);
                    let r = accumulate_gradients(&mut model, &batch, &cfg, 0, Some(&targets)).map(|l| l.total);
                    std::mem::swap(&mut model.store, s);
                    r
                },
                1e-5,
                1e-4,
                Stencil::Central4,
            )
            .unwrap();
            assert!(report.passed(), "{method}: {:?}", report.worst());
        }
    }

    #[test]
    fn elbo_without_ssl_weight_matches_erm_trajectory() {
        let (mut erm, batch, cfg_erm) = toy(Method::Erm, 4);
        let mut elbo = erm.clone();
        let cfg_elbo = TrainConfig {
            method: Method::ElboTds,
            weights: LossWeights { alpha: 0.0, ..cfg_erm.weights },
            ..cfg_erm.clone()
        };
        for step in 0..10 {
            let a = train_step(&mut erm, &batch, &cfg_erm, step, step).unwrap();
            let b = train_step(&mut elbo, &batch, &cfg_elbo, step, step).unwrap();
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            for (p, q) in erm.store.params().iter().zip(elbo.store.params()) {
                let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&p.value), bits(&q.value), "{} at step {step}", p.name);
            }
        }
    }

    #[test]
    fn small_steps_descend() {
        for method in Method::ALL {
            let mut decreased = 0;
            for trial in 0..20 {
                let (mut model, batch, cfg) = toy(method, 100 + trial);
                let targets = recon_targets(&model, &batch, &cfg, 0).unwrap();
                model.store.zero_grads();
                let before = accumulate_gradients(&mut model, &batch, &cfg, 0, Some(&targets)).unwrap().total;
                model.store.adam_step().unwrap();
                model.store.zero_grads();
                let after = accumulate_gradients(&mut model, &batch, &cfg, 0, Some(&targets)).unwrap().total;
                decreased += usize::from(after < before);
            }
            assert!(decreased >= 18, "{method}: {decreased}/20");
        }
    }

    #[test]
    fn prediction_ignores_latent_noise_and_view_count() {
        let (model, batch, _) = toy(Method::ElboTds, 5);
        let before = model.infer(&batch).unwrap();
        for j in [1, 4, 8] {
            let cfg = TrainConfig {
                augment: AugmentConfig { j, ..AugmentConfig::default() },
                ..toy_train_config(Method::ElboTds, 5)
            };
            let mut m = model.clone();
            m.store.zero_grads();
            accumulate_gradients(&mut m, &batch, &cfg, 0, None).unwrap();
            assert_eq!(m.infer(&batch).unwrap(), before);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut model, batch, cfg) = toy(Method::ElboTds, 6);
            for step in 0..10 {
                train_step(&mut model, &batch, &cfg, step, step).unwrap();
            }
            model.store
        };
        let (a, b) = (run(), run());
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.value, q.value);
            if p.name.contains(".emb.") {
                assert!(p.value.row(0).iter().all(|&x| x == 0.0), "{} padding row moved", p.name);
            }
        }
    }

    #[test]
    fn infonce_rejects_single_row_batches() {
        let (mut model, batch, cfg) = toy(Method::Infonce, 7);
        let one = batch.select(&[0]);
        assert!(matches!(train_step(&mut model, &one, &cfg, 0, 0), Err(Error::Config(_))));
    }
}
