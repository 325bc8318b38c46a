//! Per-feature drift tables across spans.

use serde::Serialize;

use super::metrics::{coefficient_of_variation, histogram, jsd};
use crate::dataset::{bucketize, FeatureSchema, SpanDataset};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftRow {
    pub feature: String,
    pub kind: &'static str,
    pub span: u32,
    /// Mean raw value over present entries (statistical features only).
    pub mean: Option<f64>,
    pub jsd_from_first: f64,
    pub jsd_from_prev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureCv {
    pub feature: String,
    /// CV of the per-span mean; `None` when the mean series averages to zero.
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    pub cv: Vec<FeatureCv>,
}

impl DriftReport {
    /// Mean consecutive-span JSD over features of `kind`, indexed by the later span.
    pub fn mean_step_jsd(&self, kind: &str) -> Vec<(u32, f64)> {
        let mut out: Vec<(u32, f64, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.kind == kind) {
            let Some(j) = r.jsd_from_prev else { continue };
            match out.iter_mut().find(|(s, _, _)| *s == r.span) {
                Some(slot) => {
                    slot.1 += j;
                    slot.2 += 1;
                }
                None => out.push((r.span, j, 1)),
            }
        }
        out.into_iter().map(|(s, t, c)| (s, t / c as f64)).collect()
    }
}

/// Marginal histograms of every feature in one span, in schema order.
pub fn marginals(schema: &FeatureSchema, span: &SpanDataset) -> Vec<(String, &'static str, Vec<f64>)> {
    let mut out = Vec::with_capacity(schema.num_columns());
    for (k, f) in schema.stat.iter().enumerate() {
        let h = histogram(
            span.records.iter().map(|r| bucketize(r.stat[k], f)),
            f.n_buckets as usize + 1,
        );
        out.push((f.name.clone(), "stat", h));
    }
    for (k, f) in schema.seq.iter().enumerate() {
        let h = histogram(
            span.records.iter().flat_map(|r| r.seq[k].iter().copied()),
            f.vocab_size as usize,
        );
        out.push((f.name.clone(), "seq", h));
    }
    for (k, f) in schema.cate.iter().enumerate() {
        let h = histogram(span.records.iter().map(|r| r.cate[k]), f.vocab_size as usize);
        out.push((f.name.clone(), "cate", h));
    }
    out
}

/// JSD of every feature's marginal against the first and previous span, plus
/// the CV of each statistical feature's per-span mean.
pub fn drift_profile(schema: &FeatureSchema, spans: &[SpanDataset]) -> Result<DriftReport> {
    let hists: Vec<_> = spans.iter().map(|s| marginals(schema, s)).collect();
    let mut rows = Vec::new();
    let mut means: Vec<Vec<f64>> = vec![Vec::new(); schema.stat.len()];
    for (t, span) in spans.iter().enumerate() {
        for (c, (name, kind, h)) in hists[t].iter().enumerate() {
            let mean = (*kind == "stat").then(|| {
                let vals: Vec<f64> = span
                    .records
                    .iter()
                    .map(|r| r.stat[c])
                    .filter(|v| !v.is_nan())
                    .collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            });
            if let Some(m) = mean {
                means[c].push(m);
            }
            rows.push(DriftRow {
                feature: name.clone(),
                kind,
                span: span.span,
                mean,
                jsd_from_first: jsd(&hists[0][c].2, h)?,
                jsd_from_prev: if t == 0 {
                    None
                } else {
                    Some(jsd(&hists[t - 1][c].2, h)?)
                },
            });
        }
    }
    let cv = schema
        .stat
        .iter()
        .zip(&means)
        .map(|(f, m)| FeatureCv {
            feature: f.name.clone(),
            cv: coefficient_of_variation(m).ok(),
        })
        .collect();
    Ok(DriftReport { rows, cv })
}
