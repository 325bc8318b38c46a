use crate::config::KvConfig;
use crate::dataset::{CateFeature, FeatureSchema, SeqFeature, Side, StatFeature};
use crate::error::{Error, Result};

/// Feature columns emitted per side.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub n_stat: usize,
    pub n_buckets: u32,
    /// Length of the other-side id history; 0 disables sequences.
    pub seq_len: usize,
    /// Stable clusters for the categorical feature; 0 disables it.
    pub n_clusters: u32,
    /// Emit the entity id as a categorical feature.
    pub id_features: bool,
    pub n_tasks: usize,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            n_stat: 16,
            n_buckets: 10,
            seq_len: 8,
            n_clusters: 8,
            id_features: true,
            n_tasks: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions_per_user: usize,
    pub n_spans: usize,
    pub d_s: usize,
    pub d_v: usize,
    pub d_z: usize,
    /// AR(1) persistence of the time-varying factors.
    pub rho: f64,
    /// Weight β of the time-varying `v_u·v_i` label path.
    pub spurious_weight: f64,
    pub shock_span: Option<usize>,
    pub shock_scale: f64,
    pub layout: FeatureLayout,
    /// Standard deviation of the `z_u·z_i` logit term.
    pub latent_scale: f64,
    /// Fraction of latent variance carried by `v`.
    pub v_share: f64,
    pub stat_noise: f64,
    pub p_missing: f64,
    pub flip_rate: f64,
    /// Per-span drift of the cluster-flip target, scaled by `sqrt(1 − rho²)`.
    pub trend: f64,
    pub temperature: f64,
    pub temp_jitter: f64,
    pub base_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 400,
            interactions_per_user: 20,
            n_spans: 8,
            d_s: 8,
            d_v: 4,
            d_z: 8,
            rho: 0.6,
            spurious_weight: 0.5,
            shock_span: None,
            shock_scale: 1.0,
            layout: FeatureLayout::default(),
            latent_scale: 1.5,
            v_share: 0.3,
            stat_noise: 0.3,
            p_missing: 0.02,
            flip_rate: 0.3,
            trend: 0.25,
            temperature: 1.0,
            temp_jitter: 0.3,
            base_rate: 0.3,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "n_users",
    "n_items",
    "interactions_per_user",
    "n_spans",
    "d_s",
    "d_v",
    "d_z",
    "rho",
    "spurious_weight",
    "shock_span",
    "shock_scale",
    "n_stat",
    "n_buckets",
    "seq_len",
    "n_clusters",
    "id_features",
    "n_tasks",
    "latent_scale",
    "v_share",
    "stat_noise",
    "p_missing",
    "flip_rate",
    "trend",
    "temperature",
    "temp_jitter",
    "base_rate",
    "seed",
];

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_spans == 0 {
            return bad("n_users, n_items and n_spans must be positive".into());
        }
        if self.interactions_per_user == 0 || self.interactions_per_user > self.n_items {
            return bad(format!(
                "interactions_per_user must lie in 1..={}",
                self.n_items
            ));
        }
        if self.d_s == 0 || self.d_v == 0 || self.d_z == 0 {
            return bad("latent dimensions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if let Some(s) = self.shock_span {
            if s >= self.n_spans {
                return bad(format!("shock_span {s} >= n_spans {}", self.n_spans));
            }
        }
        if !(self.shock_scale >= 1.0) {
            return bad("shock_scale must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.v_share) || !(0.0..1.0).contains(&self.p_missing) {
            return bad("v_share must lie in [0, 1] and p_missing in [0, 1)".into());
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad("base_rate must lie in (0, 1)".into());
        }
        if !(self.temperature > 0.0) || self.latent_scale < 0.0 || self.stat_noise < 0.0 {
            return bad("temperature must be positive; scales non-negative".into());
        }
        if self.flip_rate < 0.0 || self.trend < 0.0 || self.temp_jitter < 0.0 {
            return bad("flip_rate, trend and temp_jitter must be non-negative".into());
        }
        if self.layout.seq_len > self.n_items.min(self.n_users) {
            return bad("seq_len exceeds the number of entities".into());
        }
        self.schema().validate()
    }

    /// Per-coordinate variance of `z`, chosen so `z_u·z_i` has std `latent_scale`.
    pub fn latent_variance(&self) -> f64 {
        self.latent_scale / (self.d_z as f64).sqrt()
    }

    fn stat_sd(&self) -> f64 {
        (self.latent_variance() + self.stat_noise * self.stat_noise).sqrt()
    }

    /// Statistical features are centred here so their range `[0, 2·offset]` spans ±3 sd.
    pub fn stat_offset(&self) -> f64 {
        3.0 * self.stat_sd()
    }

    /// Column layout of the emitted records; ranges are fixed at generation time.
    pub fn schema(&self) -> FeatureSchema {
        let l = &self.layout;
        let mut schema = FeatureSchema {
            stat: Vec::new(),
            seq: Vec::new(),
            cate: Vec::new(),
            n_tasks: l.n_tasks,
        };
        let sides = [
            (Side::User, "u", self.n_users, self.n_items),
            (Side::Item, "i", self.n_items, self.n_users),
        ];
        for (side, p, _, _) in sides {
            for k in 0..l.n_stat {
                schema.stat.push(StatFeature {
                    name: format!("{p}_stat{k}"),
                    side,
                    n_buckets: l.n_buckets,
                    min: 0.0,
                    max: 2.0 * self.stat_offset(),
                });
            }
        }
        if l.seq_len > 0 {
            for (side, p, _, others) in sides {
                schema.seq.push(SeqFeature {
                    name: format!("{p}_hist"),
                    side,
                    vocab_size: others as u32 + 1,
                    max_len: l.seq_len,
                });
            }
        }
        for (side, p, own, _) in sides {
            if l.n_clusters > 0 {
                schema.cate.push(CateFeature {
                    name: format!("{p}_cluster"),
                    side,
                    vocab_size: l.n_clusters + 1,
                });
            }
            if l.id_features {
                schema.cate.push(CateFeature {
                    name: format!("{p}_id"),
                    side,
                    vocab_size: own as u32 + 1,
                });
            }
        }
        schema
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut c = KvConfig::new();
        let l = &self.layout;
        c.set("n_users", self.n_users);
        c.set("n_items", self.n_items);
        c.set("interactions_per_user", self.interactions_per_user);
        c.set("n_spans", self.n_spans);
        c.set("d_s", self.d_s);
        c.set("d_v", self.d_v);
        c.set("d_z", self.d_z);
        c.set("rho", self.rho);
        c.set("spurious_weight", self.spurious_weight);
        c.set(
            "shock_span",
            self.shock_span.map_or("none".to_owned(), |s| s.to_string()),
        );
        c.set("shock_scale", self.shock_scale);
        c.set("n_stat", l.n_stat);
        c.set("n_buckets", l.n_buckets);
        c.set("seq_len", l.seq_len);
        c.set("n_clusters", l.n_clusters);
        c.set("id_features", l.id_features);
        c.set("n_tasks", l.n_tasks);
        c.set("latent_scale", self.latent_scale);
        c.set("v_share", self.v_share);
        c.set("stat_noise", self.stat_noise);
        c.set("p_missing", self.p_missing);
        c.set("flip_rate", self.flip_rate);
        c.set("trend", self.trend);
        c.set("temperature", self.temperature);
        c.set("temp_jitter", self.temp_jitter);
        c.set("base_rate", self.base_rate);
        c.set("seed", self.seed);
        c
    }

    /// Reads keys produced by [`Self::to_kv`]; absent keys keep their defaults.
    pub fn from_kv(c: &KvConfig) -> Result<Self> {
        c.ensure_known(KEYS, "generator")?;
        let d = Self::default();
        let l = d.layout.clone();
        let shock_span = match c.get_str("shock_span") {
            None | Some("none") => None,
            Some(_) => c.get("shock_span")?,
        };
        let cfg = Self {
            n_users: c.get_or("n_users", d.n_users)?,
            n_items: c.get_or("n_items", d.n_items)?,
            interactions_per_user: c.get_or("interactions_per_user", d.interactions_per_user)?,
            n_spans: c.get_or("n_spans", d.n_spans)?,
            d_s: c.get_or("d_s", d.d_s)?,
            d_v: c.get_or("d_v", d.d_v)?,
            d_z: c.get_or("d_z", d.d_z)?,
            rho: c.get_or("rho", d.rho)?,
            spurious_weight: c.get_or("spurious_weight", d.spurious_weight)?,
            shock_span,
            shock_scale: c.get_or("shock_scale", d.shock_scale)?,
            layout: FeatureLayout {
                n_stat: c.get_or("n_stat", l.n_stat)?,
                n_buckets: c.get_or("n_buckets", l.n_buckets)?,
                seq_len: c.get_or("seq_len", l.seq_len)?,
                n_clusters: c.get_or("n_clusters", l.n_clusters)?,
                id_features: c.get_or("id_features", l.id_features)?,
                n_tasks: c.get_or("n_tasks", l.n_tasks)?,
            },
            latent_scale: c.get_or("latent_scale", d.latent_scale)?,
            v_share: c.get_or("v_share", d.v_share)?,
            stat_noise: c.get_or("stat_noise", d.stat_noise)?,
            p_missing: c.get_or("p_missing", d.p_missing)?,
            flip_rate: c.get_or("flip_rate", d.flip_rate)?,
            trend: c.get_or("trend", d.trend)?,
            temperature: c.get_or("temperature", d.temperature)?,
            temp_jitter: c.get_or("temp_jitter", d.temp_jitter)?,
            base_rate: c.get_or("base_rate", d.base_rate)?,
            seed: c.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
