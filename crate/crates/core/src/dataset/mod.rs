//! Records, spans, and mini-batches in index form.

pub mod format;
pub mod schema;

use rand::seq::SliceRandom;

pub use format::{read_span, write_span, Manifest};
pub use schema::{bucketize, CateFeature, Column, FeatureSchema, SeqFeature, Side, SideFeatures, StatFeature};

use crate::error::{Error, Result};
use crate::rng::{domain, substream};

/// One user/item interaction with raw feature values.
///
/// `stat` holds unbucketized values (NaN = absent); `seq` holds the valid
/// prefix of each sequence without padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub user: u32,
    pub item: u32,
    pub labels: Vec<u8>,
    pub stat: Vec<f64>,
    pub seq: Vec<Vec<u32>>,
    pub cate: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpanDataset {
    pub span: u32,
    pub records: Vec<Record>,
}

/// Session identifier: all records of one user within one span.
pub fn session_id(user: u32, span: u32) -> u64 {
    (u64::from(span) << 32) | u64::from(user)
}

impl SpanDataset {
    /// Record indices grouped by session, in order of first appearance.
    pub fn sessions(&self) -> Vec<Vec<usize>> {
        let mut index = std::collections::HashMap::new();
        let mut out: Vec<Vec<usize>> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let slot = *index.entry(r.user).or_insert_with(|| {
                out.push(Vec::new());
                out.len() - 1
            });
            out[slot].push(i);
        }
        out
    }
}

/// A padded id-sequence column: `ids` is row-major `n × max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqColumn {
    pub max_len: usize,
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
}

impl SeqColumn {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.max_len..(r + 1) * self.max_len]
    }
}

/// Column-major mini-batch covering both sides' features.
///
/// Feature vectors are indexed like the schema's `stat`/`seq`/`cate` lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub stat: Vec<Vec<u32>>,
    pub seq: Vec<SeqColumn>,
    pub cate: Vec<Vec<u32>>,
    /// Embedding-dropout flags per categorical column; all false in a base batch.
    pub cate_drop: Vec<Vec<bool>>,
    /// `labels[task][row]`.
    pub labels: Vec<Vec<u8>>,
    pub group_ids: Vec<u64>,
    pub span_id: u32,
    pub record_ids: Vec<usize>,
    pub users: Vec<u32>,
    pub items: Vec<u32>,
}

impl SampleBatch {
    pub fn from_records(schema: &FeatureSchema, span: &SpanDataset, rows: &[usize]) -> Self {
        let n = rows.len();
        let recs: Vec<&Record> = rows.iter().map(|&i| &span.records[i]).collect();
        let stat = schema
            .stat
            .iter()
            .enumerate()
            .map(|(k, f)| recs.iter().map(|r| bucketize(r.stat[k], f)).collect())
            .collect();
        let seq = schema
            .seq
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let mut ids = vec![0u32; n * f.max_len];
                let mut lens = Vec::with_capacity(n);
                for (r, rec) in recs.iter().enumerate() {
                    let s = &rec.seq[k];
                    ids[r * f.max_len..r * f.max_len + s.len()].copy_from_slice(s);
                    lens.push(s.len());
                }
                SeqColumn {
                    max_len: f.max_len,
                    ids,
                    lens,
                }
            })
            .collect();
        let cate = (0..schema.cate.len())
            .map(|k| recs.iter().map(|r| r.cate[k]).collect())
            .collect();
        Self {
            stat,
            seq,
            cate,
            cate_drop: vec![vec![false; n]; schema.cate.len()],
            labels: (0..schema.n_tasks)
                .map(|t| recs.iter().map(|r| r.labels[t]).collect())
                .collect(),
            group_ids: recs.iter().map(|r| session_id(r.user, span.span)).collect(),
            span_id: span.span,
            record_ids: rows.to_vec(),
            users: recs.iter().map(|r| r.user).collect(),
            items: recs.iter().map(|r| r.item).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    /// Sub-batch of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &Vec<u32>| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        Self {
            stat: self.stat.iter().map(pick).collect(),
            seq: self
                .seq
                .iter()
                .map(|c| SeqColumn {
                    max_len: c.max_len,
                    ids: rows.iter().flat_map(|&r| c.row(r).iter().copied()).collect(),
                    lens: rows.iter().map(|&r| c.lens[r]).collect(),
                })
                .collect(),
            cate: self.cate.iter().map(pick).collect(),
            cate_drop: self
                .cate_drop
                .iter()
                .map(|m| rows.iter().map(|&r| m[r]).collect())
                .collect(),
            labels: self
                .labels
                .iter()
                .map(|l| rows.iter().map(|&r| l[r]).collect())
                .collect(),
            group_ids: rows.iter().map(|&r| self.group_ids[r]).collect(),
            span_id: self.span_id,
            record_ids: rows.iter().map(|&r| self.record_ids[r]).collect(),
            users: rows.iter().map(|&r| self.users[r]).collect(),
            items: rows.iter().map(|&r| self.items[r]).collect(),
        }
    }

    /// Checks every index against the schema bounds.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let n = self.len();
        for (col, f) in self.stat.iter().zip(&schema.stat) {
            if col.len() != n || col.iter().any(|&b| b > f.n_buckets) {
                return Err(Error::Input(format!("stat column {} out of bounds", f.name)));
            }
        }
        for (col, f) in self.seq.iter().zip(&schema.seq) {
            if col.ids.len() != n * f.max_len || col.ids.iter().any(|&i| i >= f.vocab_size) {
                return Err(Error::Input(format!("seq column {} out of bounds", f.name)));
            }
        }
        for ((col, drop), f) in self.cate.iter().zip(&self.cate_drop).zip(&schema.cate) {
            if col.len() != n || drop.len() != n || col.iter().any(|&i| i >= f.vocab_size) {
                return Err(Error::Input(format!("cate column {} out of bounds", f.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Keep every session inside a single batch.
    pub listwise: bool,
}

/// Record-index plan for one pass over a span.
///
/// Sessions are shuffled as units with a stream keyed by `(shuffle_seed, span)`.
/// Without `listwise`, the shuffled record order is cut into fixed-size chunks.
/// With `listwise`, sessions are packed greedily; a session longer than the
/// batch size gets a batch of its own.
pub fn batch_plan(span: &SpanDataset, opts: BatchOptions) -> Result<Vec<Vec<usize>>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut sessions = span.sessions();
    let mut rng = substream(opts.shuffle_seed, &[domain::SHUFFLE, u64::from(span.span)]);
    sessions.shuffle(&mut rng);

    let mut batches: Vec<Vec<usize>> = Vec::new();
    if opts.listwise {
        let mut current: Vec<usize> = Vec::new();
        for s in sessions {
            if !current.is_empty() && current.len() + s.len() > opts.batch_size {
                batches.push(std::mem::take(&mut current));
            }
            current.extend(s);
        }
        if !current.is_empty() {
            batches.push(current);
        }
    } else {
        let order: Vec<usize> = sessions.into_iter().flatten().collect();
        batches.extend(order.chunks(opts.batch_size).map(<[usize]>::to_vec));
    }
    Ok(batches)
}

/// Batches for one pass over a span; see [`batch_plan`].
pub fn batch_iter<'a>(
    schema: &'a FeatureSchema,
    span: &'a SpanDataset,
    opts: BatchOptions,
) -> Result<impl Iterator<Item = SampleBatch> + 'a> {
    let plan = batch_plan(span, opts)?;
    Ok(plan
        .into_iter()
        .map(move |rows| SampleBatch::from_records(schema, span, &rows)))
}

/// The whole span as one batch in stored order (used for evaluation).
pub fn full_batch(schema: &FeatureSchema, span: &SpanDataset) -> SampleBatch {
    let rows: Vec<usize> = (0..span.records.len()).collect();
    SampleBatch::from_records(schema, span, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use schema::tests::small_schema;

    fn span_with_sessions(sizes: &[usize]) -> SpanDataset {
        let mut records = Vec::new();
        for (u, &n) in sizes.iter().enumerate() {
            for k in 0..n {
                records.push(Record {
                    user: u as u32,
                    item: k as u32,
                    labels: vec![(k % 2) as u8, 0],
                    stat: vec![0.5, -0.2],
                    seq: vec![vec![1, 2]],
                    cate: vec![3],
                });
            }
        }
        SpanDataset { span: 2, records }
    }

    fn opts(batch_size: usize, listwise: bool) -> BatchOptions {
        BatchOptions {
            batch_size,
            shuffle_seed: 11,
            listwise,
        }
    }

    #[test]
    fn ten_records_batch_three() {
        let span = span_with_sessions(&[1; 10]);
        let plan = batch_plan(&span, opts(3, false)).unwrap();
        let sizes: Vec<usize> = plan.iter().map(Vec::len).collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let span = span_with_sessions(&[3, 1, 4, 1, 5, 9, 2, 6]);
        let a = batch_plan(&span, opts(4, false)).unwrap();
        let b = batch_plan(&span, opts(4, false)).unwrap();
        assert_eq!(a, b);
        let c = batch_plan(&span, BatchOptions { shuffle_seed: 12, ..opts(4, false) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn listwise_never_splits_sessions() {
        let span = span_with_sessions(&[4, 4, 2]);
        for seed in 0..20 {
            let plan = batch_plan(&span, BatchOptions { shuffle_seed: seed, ..opts(6, true) }).unwrap();
            for batch in &plan {
                assert!(batch.len() <= 6);
            }
            for user in 0..3u32 {
                let holding: Vec<usize> = plan
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.iter().any(|&i| span.records[i].user == user))
                    .map(|(k, _)| k)
                    .collect();
                assert_eq!(holding.len(), 1, "session {user} straddles batches");
            }
        }
    }

    #[test]
    fn batches_respect_schema_and_groups() {
        let schema = small_schema();
        let span = span_with_sessions(&[2, 3]);
        let batches: Vec<SampleBatch> = batch_iter(&schema, &span, opts(5, true)).unwrap().collect();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        b.validate(&schema).unwrap();
        assert_eq!(b.seq[0].row(0), &[1, 2, 0]);
        assert_eq!(b.stat[0][0], bucketize(0.5, &schema.stat[0]));
        for (r, &g) in b.group_ids.iter().enumerate() {
            assert_eq!(g, session_id(b.users[r], 2));
        }
    }

    #[test]
    fn zero_batch_size_rejected() {
        let span = span_with_sessions(&[2]);
        assert!(batch_plan(&span, opts(0, false)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn every_record_visited_once(
            sizes in proptest::collection::vec(1usize..7, 0..30),
            batch in 1usize..12,
            listwise in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            let span = span_with_sessions(&sizes);
            let plan = batch_plan(&span, BatchOptions { batch_size: batch, shuffle_seed: seed, listwise }).unwrap();
            let mut visits = vec![0usize; span.records.len()];
            for b in &plan {
                proptest::prop_assert!(!b.is_empty());
                for &i in b {
                    visits[i] += 1;
                }
            }
            proptest::prop_assert_eq!(visits.iter().sum::<usize>(), span.records.len());
            proptest::prop_assert!(visits.iter().all(|&v| v == 1));
        }
    }
}
