use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::User, Side::Item];
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::User => "user",
            Side::Item => "item",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Side::User),
            "item" => Ok(Side::Item),
            other => Err(Error::Format(format!("unknown side {other:?}"))),
        }
    }
}

/// A numeric feature bucketized into `n_buckets` equal-width bins over `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatFeature {
    pub name: String,
    pub side: Side,
    pub n_buckets: u32,
    pub min: f64,
    pub max: f64,
}

/// An id sequence padded to `max_len` with the absent index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqFeature {
    pub name: String,
    pub side: Side,
    pub vocab_size: u32,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateFeature {
    pub name: String,
    pub side: Side,
    pub vocab_size: u32,
}

/// One feature column in global order: all stat, then seq, then cate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    Stat(usize),
    Seq(usize),
    Cate(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub stat: Vec<StatFeature>,
    pub seq: Vec<SeqFeature>,
    pub cate: Vec<CateFeature>,
    pub n_tasks: usize,
}

/// Indices into the schema's feature lists for one side.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SideFeatures {
    pub stat: Vec<usize>,
    pub seq: Vec<usize>,
    pub cate: Vec<usize>,
}

impl SideFeatures {
    pub fn len(&self) -> usize {
        self.stat.len() + self.seq.len() + self.cate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut check_name = |n: &str| {
            if n.is_empty() || n.contains(['|', '=', ' ', '\t', '\n']) {
                return Err(Error::Config(format!("bad feature name {n:?}")));
            }
            if !names.insert(n.to_owned()) {
                return Err(Error::Config(format!("duplicate feature name {n:?}")));
            }
            Ok(())
        };
        for f in &self.stat {
            check_name(&f.name)?;
            if f.n_buckets < 2 {
                return Err(Error::Config(format!("{}: n_buckets must be >= 2", f.name)));
            }
            if !(f.min.is_finite() && f.max.is_finite() && f.min < f.max) {
                return Err(Error::Config(format!("{}: need finite min < max", f.name)));
            }
        }
        for f in &self.seq {
            check_name(&f.name)?;
            if f.max_len < 1 {
                return Err(Error::Config(format!("{}: max_len must be >= 1", f.name)));
            }
            if f.vocab_size < 2 {
                return Err(Error::Config(format!("{}: vocab_size must be >= 2", f.name)));
            }
        }
        for f in &self.cate {
            check_name(&f.name)?;
            if f.vocab_size < 2 {
                return Err(Error::Config(format!("{}: vocab_size must be >= 2", f.name)));
            }
        }
        if self.n_tasks == 0 {
            return Err(Error::Config("n_tasks must be >= 1".into()));
        }
        for side in Side::BOTH {
            if self.side(side).is_empty() {
                return Err(Error::Config(format!("{side} side has no features")));
            }
        }
        Ok(())
    }

    pub fn side(&self, side: Side) -> SideFeatures {
        SideFeatures {
            stat: (0..self.stat.len())
                .filter(|&i| self.stat[i].side == side)
                .collect(),
            seq: (0..self.seq.len())
                .filter(|&i| self.seq[i].side == side)
                .collect(),
            cate: (0..self.cate.len())
                .filter(|&i| self.cate[i].side == side)
                .collect(),
        }
    }

    pub fn columns(&self) -> Vec<Column> {
        (0..self.stat.len())
            .map(Column::Stat)
            .chain((0..self.seq.len()).map(Column::Seq))
            .chain((0..self.cate.len()).map(Column::Cate))
            .collect()
    }

    pub fn num_columns(&self) -> usize {
        self.stat.len() + self.seq.len() + self.cate.len()
    }

    /// Canonical `key=value` lines; also the input of [`Self::hash`].
    pub fn to_lines(&self) -> Vec<String> {
        let mut lines = vec![format!("schema.n_tasks={}", self.n_tasks)];
        for (i, f) in self.stat.iter().enumerate() {
            lines.push(format!(
                "schema.stat.{i}={}|{}|{}|{:?}|{:?}",
                f.name, f.side, f.n_buckets, f.min, f.max
            ));
        }
        for (i, f) in self.seq.iter().enumerate() {
            lines.push(format!(
                "schema.seq.{i}={}|{}|{}|{}",
                f.name, f.side, f.vocab_size, f.max_len
            ));
        }
        for (i, f) in self.cate.iter().enumerate() {
            lines.push(format!(
                "schema.cate.{i}={}|{}|{}",
                f.name, f.side, f.vocab_size
            ));
        }
        lines
    }

    /// Parses the entries written by [`Self::to_lines`] (keys without the `schema.` prefix
    /// are ignored by the caller).
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut n_tasks = None;
        let mut stat = Vec::new();
        let mut seq = Vec::new();
        let mut cate = Vec::new();
        for (k, v) in entries {
            let Some(rest) = k.strip_prefix("schema.") else {
                continue;
            };
            if rest == "n_tasks" {
                n_tasks = Some(parse::<usize>(v, k)?);
                continue;
            }
            let (kind, idx) = rest
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("bad schema key {k}")))?;
            let idx: usize = parse(idx, k)?;
            let parts: Vec<&str> = v.split('|').collect();
            match (kind, parts.as_slice()) {
                ("stat", [name, side, nb, min, max]) => stat.push((
                    idx,
                    StatFeature {
                        name: (*name).to_owned(),
                        side: side.parse()?,
                        n_buckets: parse(nb, k)?,
                        min: parse(min, k)?,
                        max: parse(max, k)?,
                    },
                )),
                ("seq", [name, side, vocab, len]) => seq.push((
                    idx,
                    SeqFeature {
                        name: (*name).to_owned(),
                        side: side.parse()?,
                        vocab_size: parse(vocab, k)?,
                        max_len: parse(len, k)?,
                    },
                )),
                ("cate", [name, side, vocab]) => cate.push((
                    idx,
                    CateFeature {
                        name: (*name).to_owned(),
                        side: side.parse()?,
                        vocab_size: parse(vocab, k)?,
                    },
                )),
                _ => return Err(Error::Format(format!("bad schema entry {k}={v}"))),
            }
        }
        let schema = Self {
            stat: ordered(stat, "stat")?,
            seq: ordered(seq, "seq")?,
            cate: ordered(cate, "cate")?,
            n_tasks: n_tasks.ok_or_else(|| Error::Format("schema.n_tasks missing".into()))?,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// FNV-1a over the canonical lines; stable across platforms and builds.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for line in self.to_lines() {
            for b in line.bytes().chain(std::iter::once(b'\n')) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

fn ordered<T>(mut items: Vec<(usize, T)>, kind: &str) -> Result<Vec<T>> {
    items.sort_by_key(|(i, _)| *i);
    for (expect, (i, _)) in items.iter().enumerate() {
        if *i != expect {
            return Err(Error::Format(format!("schema.{kind} indices not contiguous")));
        }
    }
    Ok(items.into_iter().map(|(_, t)| t).collect())
}

pub(crate) fn parse<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse {s:?} for {what}")))
}

/// Equal-width bucket in `1..=n_buckets`; values outside `[min, max]` clamp to
/// the end bins and NaN maps to the absent index 0.
pub fn bucketize(value: f64, feature: &StatFeature) -> u32 {
    if value.is_nan() {
        return 0;
    }
    let n = feature.n_buckets;
    let width = (feature.max - feature.min) / f64::from(n);
    let k = ((value - feature.min) / width).floor();
    let k = if k < 0.0 {
        0
    } else if k >= f64::from(n - 1) {
        n - 1
    } else {
        k as u32
    };
    k + 1
}
