use std::collections::BTreeMap;

use super::bootstrap::SignificanceMatrix;
use crate::error::{Error, Result};

/// Tie-aware ranks by iterative best-first grouping.
///
/// Among unranked models the best point estimate leads a group (ties broken
/// by model id); every unranked model not significantly worse than the leader
/// joins it, and the group shares rank `1 + number already ranked`.
pub fn rank_models(sig: &SignificanceMatrix, points: &[f64], higher_is_better: bool) -> Result<Vec<usize>> {
    let n = sig.len();
    if points.len() != n {
        return Err(Error::InvalidParameter(format!("{} point estimates for {n} models", points.len())));
    }
    let mut ranks = vec![0usize; n];
    let mut unranked: Vec<usize> = (0..n).collect();
    let mut done = 0;
    while !unranked.is_empty() {
        let leader = *unranked
            .iter()
            .min_by(|&&a, &&b| {
                let (pa, pb) = if higher_is_better { (-points[a], -points[b]) } else { (points[a], points[b]) };
                pa.total_cmp(&pb).then_with(|| sig.model_ids[a].cmp(&sig.model_ids[b]))
            })
            .expect("non-empty");
        let (group, rest): (Vec<usize>, Vec<usize>) =
            unranked.iter().partition(|&&m| m == leader || !sig.better[leader][m]);
        for &m in &group {
            ranks[m] = done + 1;
        }
        done += group.len();
        unranked = rest;
    }
    Ok(ranks)
}

/// Median with half steps for even counts.
pub fn median_rank(ranks: &[f64]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Undefined("median of no ranks".into()));
    }
    let mut v = ranks.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Median rank per category and model. `per_task` maps category to the rank
/// rows of its tasks, each row holding one rank per model.
pub fn median_ranks<K: Ord + Clone>(per_task: &BTreeMap<K, Vec<Vec<f64>>>) -> Result<BTreeMap<K, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (cat, rows) in per_task {
        let n_models = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n_models) {
            return Err(Error::InvalidParameter("rank rows differ in model count".into()));
        }
        let medians = (0..n_models)
            .map(|m| median_rank(&rows.iter().map(|r| r[m]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Undefined("category without tasks".into()));
        }
        out.insert(cat.clone(), medians);
    }
    Ok(out)
}
