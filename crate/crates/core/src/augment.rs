//! Feature-type-specific augmentations producing J views per batch.
//!
//! Each view draws, per sample, a random subset of exactly `⌈p·F⌉` of the `F`
//! feature columns; only those columns are perturbed. Statistical buckets are
//! shifted by a uniform integer offset, sequences are masked position-wise,
//! and categorical columns are flagged for embedding dropout.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use crate::config::KvConfig;
use crate::dataset::{Column, FeatureSchema, SampleBatch};
use crate::error::{Error, Result};
use crate::rng::{domain, substream, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Maximum bucket offset.
    pub r: u32,
    pub p_seq: f64,
    pub p_cate: f64,
    /// Fraction of feature columns eligible for perturbation per view.
    pub p: f64,
    pub j: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            r: 2,
            p_seq: 0.2,
            p_cate: 0.2,
            p: 0.2,
            j: 4,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_seq", self.p_seq), ("p_cate", self.p_cate), ("p", self.p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.j == 0 {
            return Err(Error::Config("J must be >= 1".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, c: &mut KvConfig, prefix: &str) {
        c.set(&format!("{prefix}r"), self.r);
        c.set(&format!("{prefix}p_seq"), self.p_seq);
        c.set(&format!("{prefix}p_cate"), self.p_cate);
        c.set(&format!("{prefix}p"), self.p);
        c.set(&format!("{prefix}j"), self.j);
    }

    pub fn read_kv(c: &KvConfig, prefix: &str, seed: u64) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            r: c.get_or(&format!("{prefix}r"), d.r)?,
            p_seq: c.get_or(&format!("{prefix}p_seq"), d.p_seq)?,
            p_cate: c.get_or(&format!("{prefix}p_cate"), d.p_cate)?,
            p: c.get_or(&format!("{prefix}p"), d.p)?,
            j: c.get_or(&format!("{prefix}j"), d.j)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `clamp(b + ε, 1, b_max)` with `ε` uniform on `{−r, …, r}`; the absent index 0 is kept.
pub fn perturb_bucket(b: u32, r: u32, b_max: u32, rng: &mut Rng) -> u32 {
    if b == 0 {
        return 0;
    }
    let r = i64::from(r);
    let eps = rng.random_range(-r..=r);
    apply_offset(b, eps, b_max)
}

fn apply_offset(b: u32, eps: i64, b_max: u32) -> u32 {
    (i64::from(b) + eps).clamp(1, i64::from(b_max)) as u32
}

/// Replaces each of the first `len` ids by 0 with probability `p_seq`.
pub fn mask_sequence(ids: &mut [u32], len: usize, p_seq: f64, rng: &mut Rng) {
    for id in ids.iter_mut().take(len) {
        if rng.random_bool(p_seq) {
            *id = 0;
        }
    }
}

/// Independent embedding-dropout flags.
pub fn categorical_drop_mask(n_features: usize, p_cate: f64, rng: &mut Rng) -> Vec<bool> {
    (0..n_features).map(|_| rng.random_bool(p_cate)).collect()
}

/// Number of eligible columns, `⌈p·F⌉`, robust to rounding in `p·F`.
pub fn eligible_count(p: f64, n_columns: usize) -> usize {
    ((p * n_columns as f64 - 1e-9).ceil().max(0.0) as usize).min(n_columns)
}

/// A uniformly random subset of exactly `⌈p·F⌉` columns.
pub fn select_perturbed_features(schema: &FeatureSchema, p: f64, rng: &mut Rng) -> Vec<bool> {
    eligibility(schema.num_columns(), p, rng)
}

fn eligibility(n: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    let mut mask = vec![false; n];
    for i in sample_indices(rng, n, eligible_count(p, n)) {
        mask[i] = true;
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedViews {
    pub views: Vec<SampleBatch>,
    /// `eligible[view][sample][column]`, columns in schema order.
    pub eligible: Vec<Vec<Vec<bool>>>,
}

/// Builds `J` views of `batch`; view `j` depends only on `(seed, span, batch_index, j)`.
pub fn make_views(
    schema: &FeatureSchema,
    batch: &SampleBatch,
    config: &AugmentConfig,
    batch_index: u64,
) -> Result<AugmentedViews> {
    config.validate()?;
    let columns = schema.columns();
    let mut views = Vec::with_capacity(config.j);
    let mut eligible = Vec::with_capacity(config.j);
    for j in 0..config.j {
        let mut rng = substream(
            config.seed,
            &[domain::AUGMENT, u64::from(batch.span_id), batch_index, j as u64],
        );
        let mut view = batch.clone();
        let mut masks = Vec::with_capacity(batch.len());
        for row in 0..batch.len() {
            let mask = eligibility(columns.len(), config.p, &mut rng);
            for (&col, _) in columns.iter().zip(&mask).filter(|(_, &m)| m) {
                match col {
                    Column::Stat(k) => {
                        let b = view.stat[k][row];
                        view.stat[k][row] = perturb_bucket(b, config.r, schema.stat[k].n_buckets, &mut rng);
                    }
                    Column::Seq(k) => {
                        let c = &mut view.seq[k];
                        let len = c.lens[row];
                        let start = row * c.max_len;
                        mask_sequence(&mut c.ids[start..start + c.max_len], len, config.p_seq, &mut rng);
                    }
                    Column::Cate(k) => {
                        view.cate_drop[k][row] = rng.random_bool(config.p_cate);
                    }
                }
            }
            masks.push(mask);
        }
        views.push(view);
        eligible.push(masks);
    }
    Ok(AugmentedViews { views, eligible })
}
