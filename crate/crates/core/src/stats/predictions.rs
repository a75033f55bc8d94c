use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::LabelKind;
use crate::error::{Error, Result};

/// Per-record model outputs aligned with targets.
///
/// Binary columns hold probabilities; continuous columns hold z-normalized
/// predictions and targets. Row order is the canonical test-set order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub model_id: String,
    pub task_id: String,
    pub record_ids: Vec<String>,
    pub label_names: Vec<String>,
    pub kinds: Vec<LabelKind>,
    /// Row-major `[records × labels]`.
    pub scores: Vec<f64>,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model_id: String,
    task_id: String,
    label_names: Vec<String>,
    kinds: Vec<LabelKind>,
}

impl PredictionSet {
    pub fn n_records(&self) -> usize {
        self.record_ids.len()
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn score(&self, row: usize, label: usize) -> f64 {
        self.scores[row * self.n_labels() + label]
    }

    pub fn target(&self, row: usize, label: usize) -> Option<f64> {
        let i = row * self.n_labels() + label;
        self.mask[i].then(|| self.targets[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_records() * self.n_labels();
        if self.kinds.len() != self.n_labels()
            || self.scores.len() != n
            || self.targets.len() != n
            || self.mask.len() != n
        {
            return Err(Error::InvalidParameter(format!(
                "prediction set `{}` has misaligned shapes",
                self.model_id
            )));
        }
        Ok(())
    }

    /// Keeps the label columns in `subset`, in the given order.
    pub fn evaluate_subset(&self, subset: &[usize]) -> Result<PredictionSet> {
        if let Some(&bad) = subset.iter().find(|&&l| l >= self.n_labels()) {
            return Err(Error::InvalidParameter(format!(
                "label index {bad} out of range for {} labels",
                self.n_labels()
            )));
        }
        let k = self.n_labels();
        let pick = |v: &[f64]| -> Vec<f64> {
            (0..self.n_records()).flat_map(|r| subset.iter().map(move |&l| v[r * k + l])).collect()
        };
        Ok(PredictionSet {
            model_id: self.model_id.clone(),
            task_id: self.task_id.clone(),
            record_ids: self.record_ids.clone(),
            label_names: subset.iter().map(|&l| self.label_names[l].clone()).collect(),
            kinds: subset.iter().map(|&l| self.kinds[l]).collect(),
            scores: pick(&self.scores),
            targets: pick(&self.targets),
            mask: (0..self.n_records())
                .flat_map(|r| subset.iter().map(move |&l| self.mask[r * k + l]))
                .collect(),
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `record_id`, one column per label and one `<label>_target` column
/// per label to `path`, plus a JSON sidecar with label kinds and ids.
pub fn write_predictions(path: &Path, preds: &PredictionSet) -> Result<()> {
    preds.validate()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["record_id".to_string()];
    header.extend(preds.label_names.iter().cloned());
    header.extend(preds.label_names.iter().map(|n| format!("{n}_target")));
    w.write_record(&header)?;
    for (r, id) in preds.record_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..preds.n_labels()).map(|l| preds.score(r, l).to_string()));
        row.extend((0..preds.n_labels()).map(|l| preds.target(r, l).map(|t| t.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        model_id: preds.model_id.clone(),
        task_id: preds.task_id.clone(),
        label_names: preds.label_names.clone(),
        kinds: preds.kinds.clone(),
    };
    let p = sidecar_path(path);
    std::fs::write(&p, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(p, e))
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let p = sidecar_path(path);
    let side: Sidecar = serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
    let k = side.label_names.len();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let expected: Vec<String> = std::iter::once("record_id".to_string())
        .chain(side.label_names.iter().cloned())
        .chain(side.label_names.iter().map(|n| format!("{n}_target")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::InvalidParameter(format!("{}: unexpected header", path.display())));
    }
    let mut set = PredictionSet {
        model_id: side.model_id,
        task_id: side.task_id,
        record_ids: Vec::new(),
        label_names: side.label_names,
        kinds: side.kinds,
        scores: Vec::new(),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::InvalidParameter(format!("{}: bad number `{s}`", path.display())))
    };
    for rec in r.records() {
        let rec = rec?;
        set.record_ids.push(rec[0].to_string());
        for l in 0..k {
            set.scores.push(parse(&rec[1 + l])?);
        }
        for l in 0..k {
            let cell = rec[1 + k + l].trim();
            if cell.is_empty() {
                set.targets.push(0.0);
                set.mask.push(false);
            } else {
                set.targets.push(parse(cell)?);
                set.mask.push(true);
            }
        }
    }
    set.validate()?;
    Ok(set)
}
