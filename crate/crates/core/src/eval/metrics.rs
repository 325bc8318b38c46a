use std::collections::HashMap;

use crate::error::{Error, Result};

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann–Whitney statistic; tied scores get midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of positive ranks, kept in integer half-units so ties are exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += pos_in_tie * (i + j + 2) as u128;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaucReport {
    pub value: f64,
    pub groups_used: usize,
    pub groups_skipped: usize,
}

/// Group-size-weighted mean of per-group AUC; single-class groups are skipped and counted.
pub fn gauc(scores: &[f64], labels: &[u8], group_ids: &[u64]) -> Result<GaucReport> {
    check_labels(scores, labels)?;
    if group_ids.len() != scores.len() {
        return Err(Error::Dimension("group ids do not match scores".into()));
    }
    let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, &g) in group_ids.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    let mut keys: Vec<u64> = groups.keys().copied().collect();
    keys.sort_unstable();

    let mut weighted = 0.0;
    let mut weight = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for g in keys {
        let rows = &groups[&g];
        s.clear();
        l.clear();
        s.extend(rows.iter().map(|&i| scores[i]));
        l.extend(rows.iter().map(|&i| labels[i]));
        match auc(&s, &l) {
            Ok(a) => {
                weighted += a * rows.len() as f64;
                weight += rows.len() as f64;
                used += 1;
            }
            Err(Error::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric(format!(
            "gauc: none of {skipped} groups has both classes"
        )));
    }
    Ok(GaucReport {
        value: weighted / weight,
        groups_used: used,
        groups_skipped: skipped,
    })
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::UndefinedMetric("cv of an empty series".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::UndefinedMetric("cv with zero mean".into()));
    }
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

fn normalize(p: &[f64], what: &str) -> Result<Vec<f64>> {
    if p.iter().any(|&x| x < 0.0 || x.is_nan()) {
        return Err(Error::Input(format!("{what} has negative or NaN mass")));
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Input(format!("{what} has no mass")));
    }
    Ok(p.iter().map(|x| x / total).collect())
}

/// Base-2 Jensen–Shannon divergence; inputs are renormalized.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "jsd support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let p = normalize(p, "p")?;
    let q = normalize(q, "q")?;
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).log2())
            .sum()
    };
    let d = 0.5 * kl_to_mid(&p, &q) + 0.5 * kl_to_mid(&q, &p);
    Ok(d.clamp(0.0, 1.0))
}

/// Counts of each index in `0..size`, as a histogram.
pub fn histogram(values: impl IntoIterator<Item = u32>, size: usize) -> Vec<f64> {
    let mut h = vec![0.0; size];
    for v in values {
        h[v as usize] += 1.0;
    }
    h
}
