//! Synthetic span-partitioned interactions from a causal graph.
//!
//! Every user and item owns stable factors `s` (drawn once) and time-varying
//! factors `v` (an AR(1) chain across spans). Latents mix both,
//! `z = A·s + B·v`, and observed features are views of `s`, `v`, and `z`:
//!
//! * statistical: `offset + w_k·z + noise`, per entity and span;
//! * categorical: the nearest stable cluster of `s`, flipped with probability
//!   growing with `‖v‖` to the cluster of `s + G·(v + trend(t))`; optionally the
//!   entity id itself;
//! * sequential: top-L ids of the other side sampled from
//!   `softmax(s·s_other / T(t))`, with `T(t)` driven by a global AR(1) factor.
//!
//! Labels follow `sigmoid(z_u·z_i + β·v_u·v_i + b)`; the `β` term is a purely
//! time-varying path. At the shock span every `v` is scaled before emission.

mod config;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub use config::{FeatureLayout, GeneratorConfig};

use crate::dataset::{Manifest, Record, Side, SpanDataset};
use crate::error::{Error, Result};
use crate::nn::{dot, sigmoid, Matrix};
use crate::rng::{domain, substream, Rng};

const SIDE_USER: u64 = 0;
const SIDE_ITEM: u64 = 1;

fn side_key(side: Side) -> u64 {
    match side {
        Side::User => SIDE_USER,
        Side::Item => SIDE_ITEM,
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, normal_vec(rng, rows * cols, scale)).expect("shape")
}

fn matvec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| dot(m.row(r), x)).collect()
}

/// Stable factors: drawn once per dataset, never regenerated across spans.
#[derive(Debug, Clone, PartialEq)]
pub struct StableFactors {
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
}

impl StableFactors {
    fn side(&self, side: Side) -> &[Vec<f64>] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }
}

/// Time-varying factors at one span, plus the global factor driving sequence temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct VaryingFactors {
    pub span: usize,
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
    pub global: f64,
}

impl VaryingFactors {
    fn side(&self, side: Side) -> &[Vec<f64>] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }
}

/// One AR(1) step: `v' = rho·v + sqrt(1 − rho²)·η`, coordinate-wise, for every
/// entity and the global factor.
pub fn evolve_varying_factors(prev: &VaryingFactors, rho: f64, rng: &mut Rng) -> Result<VaryingFactors> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
    }
    let innovation = (1.0 - rho * rho).sqrt();
    let mut step = |v: &Vec<f64>| -> Vec<f64> {
        v.iter().map(|x| rho * x + innovation * normal(rng)).collect()
    };
    let users = prev.users.iter().map(&mut step).collect();
    let items = prev.items.iter().map(&mut step).collect();
    let global = rho * prev.global + innovation * normal(rng);
    Ok(VaryingFactors {
        span: prev.span + 1,
        users,
        items,
        global,
    })
}

/// Fixed structural maps of one side.
#[derive(Debug, Clone)]
struct SideMaps {
    a: Matrix,
    b: Matrix,
    g: Matrix,
    prototypes: Vec<Vec<f64>>,
    stat_w: Vec<Vec<f64>>,
    flip_u: Vec<f64>,
}

/// Per-entity observations at one span.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityFeatures {
    pub z: Vec<f64>,
    /// Time-varying factors after any shock scaling.
    pub v: Vec<f64>,
    pub stat: Vec<f64>,
    pub seq: Vec<u32>,
    pub cate: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    stable: StableFactors,
    users: SideMaps,
    items: SideMaps,
    trend_dir: Vec<f64>,
    biases: Vec<f64>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut stable_rng = substream(seed, &[domain::STABLE]);
        let stable = StableFactors {
            users: (0..config.n_users)
                .map(|_| normal_vec(&mut stable_rng, config.d_s, 1.0))
                .collect(),
            items: (0..config.n_items)
                .map(|_| normal_vec(&mut stable_rng, config.d_s, 1.0))
                .collect(),
        };
        let maps = |side: Side| {
            let mut rng = substream(seed, &[domain::MIXING, side_key(side)]);
            let var_z = config.latent_variance();
            let a_scale = (var_z * (1.0 - config.v_share) / config.d_s as f64).sqrt();
            let b_scale = (var_z * config.v_share / config.d_v as f64).sqrt();
            let a = normal_matrix(&mut rng, config.d_z, config.d_s, a_scale);
            let b = normal_matrix(&mut rng, config.d_z, config.d_v, b_scale);
            let g = normal_matrix(&mut rng, config.d_s, config.d_v, 1.0 / (config.d_v as f64).sqrt());
            let prototypes = (0..config.layout.n_clusters)
                .map(|_| normal_vec(&mut rng, config.d_s, 1.0))
                .collect();
            let stat_w = (0..config.layout.n_stat)
                .map(|_| {
                    let w = normal_vec(&mut rng, config.d_z, 1.0);
                    let norm = dot(&w, &w).sqrt().max(1e-12);
                    w.into_iter().map(|x| x / norm).collect()
                })
                .collect();
            let n = match side {
                Side::User => config.n_users,
                Side::Item => config.n_items,
            };
            let flip_u = (0..n).map(|_| rng.random::<f64>()).collect();
            SideMaps {
                a,
                b,
                g,
                prototypes,
                stat_w,
                flip_u,
            }
        };
        let users = maps(Side::User);
        let items = maps(Side::Item);
        let mut trend_rng = substream(seed, &[domain::GLOBAL, 1]);
        let t = normal_vec(&mut trend_rng, config.d_v, 1.0);
        let norm = dot(&t, &t).sqrt().max(1e-12);
        let trend_dir = t.into_iter().map(|x| x / norm).collect();

        let mut generator = Self {
            config,
            stable,
            users,
            items,
            trend_dir,
            biases: Vec::new(),
        };
        generator.biases = generator.calibrate_biases()?;
        Ok(generator)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn stable(&self) -> &StableFactors {
        &self.stable
    }

    /// Per-task logit offsets found by bisection on span 0.
    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    fn maps(&self, side: Side) -> &SideMaps {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    pub fn initial_varying(&self) -> VaryingFactors {
        let c = &self.config;
        let mut rng = substream(c.seed, &[domain::VARYING, 0]);
        let users = (0..c.n_users).map(|_| normal_vec(&mut rng, c.d_v, 1.0)).collect();
        let items = (0..c.n_items).map(|_| normal_vec(&mut rng, c.d_v, 1.0)).collect();
        VaryingFactors {
            span: 0,
            users,
            items,
            global: normal(&mut rng),
        }
    }

    /// Factors for the span after `prev`, from the stream keyed by that span.
    pub fn next_varying(&self, prev: &VaryingFactors) -> Result<VaryingFactors> {
        let mut rng = substream(self.config.seed, &[domain::VARYING, prev.span as u64 + 1]);
        evolve_varying_factors(prev, self.config.rho, &mut rng)
    }

    fn temperature(&self, varying: &VaryingFactors) -> f64 {
        self.config.temperature * (self.config.temp_jitter * varying.global).exp()
    }

    fn trend(&self, span: usize) -> Vec<f64> {
        let c = &self.config;
        let scale = c.trend * (1.0 - c.rho * c.rho).sqrt() * span as f64;
        self.trend_dir.iter().map(|x| scale * x).collect()
    }

    fn nearest_cluster(&self, side: Side, x: &[f64]) -> u32 {
        let protos = &self.maps(side).prototypes;
        let mut best = (0usize, f64::INFINITY);
        for (k, p) in protos.iter().enumerate() {
            let d: f64 = p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0 as u32 + 1
    }

    /// Observed features of one entity at the span of `varying`.
    pub fn entity_features(&self, side: Side, entity: usize, varying: &VaryingFactors) -> EntityFeatures {
        let c = &self.config;
        let span = varying.span;
        let maps = self.maps(side);
        let s = &self.stable.side(side)[entity];
        let shock = if c.shock_span == Some(span) { c.shock_scale } else { 1.0 };
        let v: Vec<f64> = varying.side(side)[entity].iter().map(|x| shock * x).collect();
        let z: Vec<f64> = matvec(&maps.a, s)
            .into_iter()
            .zip(matvec(&maps.b, &v))
            .map(|(x, y)| x + y)
            .collect();

        let mut rng = substream(c.seed, &[domain::ENTITY_SPAN, side_key(side), entity as u64, span as u64]);
        let offset = c.stat_offset();
        let stat = maps
            .stat_w
            .iter()
            .map(|w| {
                let x = offset + dot(w, &z) + c.stat_noise * normal(&mut rng);
                if rng.random_bool(c.p_missing) {
                    f64::NAN
                } else {
                    x
                }
            })
            .collect();

        let mut cate = Vec::with_capacity(2);
        if c.layout.n_clusters > 0 {
            let stable_cluster = self.nearest_cluster(side, s);
            let flip_p = (c.flip_rate * dot(&v, &v).sqrt() / (c.d_v as f64).sqrt()).min(1.0);
            let cluster = if maps.flip_u[entity] < flip_p {
                let drift: Vec<f64> = v.iter().zip(self.trend(span)).map(|(a, b)| a + b).collect();
                let moved: Vec<f64> = s.iter().zip(matvec(&maps.g, &drift)).map(|(a, b)| a + b).collect();
                self.nearest_cluster(side, &moved)
            } else {
                stable_cluster
            };
            cate.push(cluster);
        }
        if c.layout.id_features {
            cate.push(entity as u32 + 1);
        }

        let seq = if c.layout.seq_len > 0 {
            let others = self.stable.side(match side {
                Side::User => Side::Item,
                Side::Item => Side::User,
            });
            let temp = self.temperature(varying);
            let mut keys: Vec<(f64, u32)> = others
                .iter()
                .enumerate()
                .map(|(k, o)| {
                    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    (dot(s, o) / temp - (-u.ln()).ln(), k as u32 + 1)
                })
                .collect();
            let len = c.layout.seq_len.min(keys.len());
            keys.select_nth_unstable_by(len - 1, |a, b| b.0.total_cmp(&a.0));
            keys.truncate(len);
            keys.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
            keys.into_iter().map(|(_, id)| id).collect()
        } else {
            Vec::new()
        };

        EntityFeatures { z, v, stat, seq, cate }
    }

    fn logit(&self, u: &EntityFeatures, i: &EntityFeatures) -> f64 {
        dot(&u.z, &i.z) + self.config.spurious_weight * dot(&u.v, &i.v)
    }

    fn labels(&self, logit: f64, rng: &mut Rng) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.biases.len());
        let mut alive = true;
        for &b in &self.biases {
            let draw: f64 = rng.random();
            alive = alive && draw < sigmoid(logit + b);
            out.push(u8::from(alive));
        }
        out
    }

    fn record(&self, user: usize, item: usize, u: &EntityFeatures, i: &EntityFeatures, rng: &mut Rng) -> Record {
        let labels = self.labels(self.logit(u, i), rng);
        let mut stat = u.stat.clone();
        stat.extend_from_slice(&i.stat);
        let mut seq = Vec::with_capacity(2);
        if self.config.layout.seq_len > 0 {
            seq.push(u.seq.clone());
            seq.push(i.seq.clone());
        }
        let mut cate = u.cate.clone();
        cate.extend_from_slice(&i.cate);
        Record {
            user: user as u32,
            item: item as u32,
            labels,
            stat,
            seq,
            cate,
        }
    }

    /// One interaction record; entity features come from their own
    /// `(entity, span)` streams and the labels from `rng`.
    pub fn emit_sample(&self, user: usize, item: usize, varying: &VaryingFactors, rng: &mut Rng) -> Record {
        let u = self.entity_features(Side::User, user, varying);
        let i = self.entity_features(Side::Item, item, varying);
        self.record(user, item, &u, &i, rng)
    }

    fn pairs(&self, span: usize) -> Vec<(usize, usize)> {
        let c = &self.config;
        let mut out = Vec::with_capacity(c.n_users * c.interactions_per_user);
        for u in 0..c.n_users {
            let mut rng = substream(c.seed, &[domain::INTERACTIONS, span as u64, u as u64]);
            for i in sample_indices(&mut rng, c.n_items, c.interactions_per_user) {
                out.push((u, i));
            }
        }
        out
    }

    fn all_features(&self, varying: &VaryingFactors) -> (Vec<EntityFeatures>, Vec<EntityFeatures>) {
        let u = (0..self.config.n_users)
            .map(|e| self.entity_features(Side::User, e, varying))
            .collect();
        let i = (0..self.config.n_items)
            .map(|e| self.entity_features(Side::Item, e, varying))
            .collect();
        (u, i)
    }

    fn calibrate_biases(&self) -> Result<Vec<f64>> {
        let v0 = self.initial_varying();
        let (uf, itf) = self.all_features(&v0);
        let logits: Vec<f64> = self
            .pairs(0)
            .into_iter()
            .map(|(u, i)| self.logit(&uf[u], &itf[i]))
            .collect();
        // Cascade: task k keeps a positive only if tasks < k did; each task
        // halves the previous base rate.
        let mut biases: Vec<f64> = Vec::new();
        let mut target = self.config.base_rate;
        for _ in 0..self.config.layout.n_tasks {
            let rate = |b: f64| -> f64 {
                logits
                    .iter()
                    .map(|&l| biases.iter().map(|&bj| sigmoid(l + bj)).product::<f64>() * sigmoid(l + b))
                    .sum::<f64>()
                    / logits.len() as f64
            };
            let (mut lo, mut hi) = (-30.0, 30.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if rate(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            biases.push(0.5 * (lo + hi));
            target *= 0.5;
        }
        Ok(biases)
    }

    /// Records of one span, users in order, each with `interactions_per_user` distinct items.
    pub fn span(&self, varying: &VaryingFactors) -> SpanDataset {
        let (uf, itf) = self.all_features(varying);
        let span = varying.span;
        let records = self
            .pairs(span)
            .into_iter()
            .enumerate()
            .map(|(idx, (u, i))| {
                let mut rng = substream(self.config.seed, &[domain::RECORD, span as u64, idx as u64]);
                self.record(u, i, &uf[u], &itf[i], &mut rng)
            })
            .collect();
        SpanDataset {
            span: span as u32,
            records,
        }
    }

    /// All spans in chronological order.
    pub fn spans(&self) -> Result<Vec<SpanDataset>> {
        let mut out = Vec::with_capacity(self.config.n_spans);
        let mut v = self.initial_varying();
        for t in 0..self.config.n_spans {
            if t > 0 {
                v = self.next_varying(&v)?;
            }
            out.push(self.span(&v));
        }
        Ok(out)
    }

    /// Writes span files and the manifest into `dir`.
    pub fn write_dataset(&self, dir: &std::path::Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let manifest = Manifest {
            schema: self.config.schema(),
            seed: self.config.seed,
            span_files: (0..self.config.n_spans).map(Manifest::span_file_name).collect(),
            config: self.config.to_kv().entries().clone(),
            root: dir.to_path_buf(),
        };
        let mut v = self.initial_varying();
        for t in 0..self.config.n_spans {
            if t > 0 {
                v = self.next_varying(&v)?;
            }
            manifest.write_span(&self.span(&v))?;
        }
        manifest.write(dir)?;
        Ok(manifest)
    }
}

/// Generates a dataset on disk; see [`Generator`].
pub fn generate_dataset(config: GeneratorConfig, dir: &std::path::Path) -> Result<Manifest> {
    Generator::new(config)?.write_dataset(dir)
}
