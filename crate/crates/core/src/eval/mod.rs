//! Ranking metrics, drift statistics, and collapse diagnostics.

pub mod collapse;
pub mod drift;
pub mod metrics;

use serde::Serialize;

pub use collapse::{collapse_probe, CollapseReport};
pub use drift::{drift_profile, DriftReport, DriftRow, FeatureCv};
pub use metrics::{auc, coefficient_of_variation, gauc, histogram, jsd, GaucReport};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub auc: f64,
    pub gauc: f64,
    pub groups_used: usize,
    pub groups_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub span: u32,
    pub n_records: usize,
    pub tasks: Vec<TaskMetrics>,
    pub collapse: Option<CollapseReport>,
}

/// AUC and GAUC for each task; `scores[task][row]`, `labels[task][row]`.
pub fn metric_report(
    span: u32,
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    group_ids: &[u64],
) -> Result<MetricReport> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("score and label task counts differ".into()));
    }
    let tasks = scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(task, (s, l))| {
            let g = gauc(s, l, group_ids)?;
            Ok(TaskMetrics {
                task,
                auc: auc(s, l)?,
                gauc: g.value,
                groups_used: g.groups_used,
                groups_skipped: g.groups_skipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        span,
        n_records: group_ids.len(),
        tasks,
        collapse: None,
    })
}
