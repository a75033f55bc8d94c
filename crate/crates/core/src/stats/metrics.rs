use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::predictions::PredictionSet;
use crate::dataio::LabelKind;
use crate::error::{Error, Result};

/// Area under the ROC curve as pairwise concordance with half credit for
/// tied scores, computed from midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // twice the rank sum keeps midranks integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j) as u64;
        rank2_pos += mid2 * order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

fn rows_or_all(preds: &PredictionSet, rows: Option<&[usize]>) -> Vec<usize> {
    rows.map(<[usize]>::to_vec).unwrap_or_else(|| (0..preds.n_records()).collect())
}

/// Unweighted mean of per-label AUROC over binary labels defined on `rows`
/// (all records when `None`). Labels with a single present class are skipped.
pub fn macro_auroc(preds: &PredictionSet, rows: Option<&[usize]>) -> Result<f64> {
    let rows = rows_or_all(preds, rows);
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for l in 0..preds.n_labels() {
        if preds.kinds[l] != LabelKind::Binary {
            continue;
        }
        scores.clear();
        labels.clear();
        for &r in &rows {
            if let Some(t) = preds.target(r, l) {
                scores.push(preds.score(r, l));
                labels.push(t > 0.5);
            }
        }
        match auroc(&scores, &labels) {
            Ok(a) => {
                sum += a;
                n += 1;
            }
            Err(Error::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::Undefined("no label with both classes present".into()));
    }
    Ok(sum / n as f64)
}

/// Mean absolute error per continuous label over present cells, averaged
/// over labels. Scores and targets are both in z-space.
pub fn mean_z_mae(preds: &PredictionSet, rows: Option<&[usize]>) -> Result<f64> {
    let rows = rows_or_all(preds, rows);
    let mut sum = 0.0;
    let mut n = 0usize;
    for l in 0..preds.n_labels() {
        if preds.kinds[l] != LabelKind::Continuous {
            continue;
        }
        let (mut s, mut c) = (0.0, 0usize);
        for &r in &rows {
            if let Some(t) = preds.target(r, l) {
                s += (preds.score(r, l) - t).abs();
                c += 1;
            }
        }
        if c > 0 {
            sum += s / c as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Undefined("no continuous label with present targets".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroAuroc,
    MeanZMae,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::MacroAuroc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MacroAuroc => "macro_auroc",
            Metric::MeanZMae => "mean_z_mae",
        }
    }

    pub fn evaluate(self, preds: &PredictionSet, rows: Option<&[usize]>) -> Result<f64> {
        match self {
            Metric::MacroAuroc => macro_auroc(preds, rows),
            Metric::MeanZMae => mean_z_mae(preds, rows),
        }
    }

    /// `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    /// Selection metric of a label set: AUROC whenever a binary label exists.
    pub fn for_kinds(kinds: &[LabelKind]) -> Metric {
        if kinds.contains(&LabelKind::Binary) {
            Metric::MacroAuroc
        } else {
            Metric::MeanZMae
        }
    }
}
