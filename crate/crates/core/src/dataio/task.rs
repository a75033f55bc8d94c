use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultilabelClassification,
    Regression,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Binary,
    Continuous,
}

/// The seven task categories used for median-rank summaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    AdultEcgInterpretation,
    PediatricEcgInterpretation,
    CardiacStructureAndFunction,
    CardiacOutcomes,
    NonCardiacOutcomes,
    AcuteCarePredictions,
    PatientCharacteristics,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::AdultEcgInterpretation,
        Category::PediatricEcgInterpretation,
        Category::CardiacStructureAndFunction,
        Category::CardiacOutcomes,
        Category::NonCardiacOutcomes,
        Category::AcuteCarePredictions,
        Category::PatientCharacteristics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::AdultEcgInterpretation => "adult_ecg_interpretation",
            Category::PediatricEcgInterpretation => "pediatric_ecg_interpretation",
            Category::CardiacStructureAndFunction => "cardiac_structure_and_function",
            Category::CardiacOutcomes => "cardiac_outcomes",
            Category::NonCardiacOutcomes => "non_cardiac_outcomes",
            Category::AcuteCarePredictions => "acute_care_predictions",
            Category::PatientCharacteristics => "patient_characteristics",
        }
    }
}

/// Declares the prediction targets of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub category: Category,
    pub label_names: Vec<String>,
    pub label_kinds: Vec<LabelKind>,
    /// Named label subsets that are scored separately but never trained on
    /// their own.
    #[serde(default)]
    pub eval_subsets: BTreeMap<String, Vec<usize>>,
}

impl TaskSpec {
    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_names.is_empty() {
            return Err(Error::Manifest(format!("task `{}` declares no labels", self.name)));
        }
        let unique: BTreeSet<_> = self.label_names.iter().collect();
        if unique.len() != self.label_names.len() {
            return Err(Error::Manifest(format!("task `{}` has duplicate label names", self.name)));
        }
        if self.label_kinds.len() != self.label_names.len() {
            return Err(Error::Manifest(format!(
                "task `{}`: {} label kinds for {} labels",
                self.name,
                self.label_kinds.len(),
                self.label_names.len()
            )));
        }
        let has = |k: LabelKind| self.label_kinds.contains(&k);
        let consistent = match self.kind {
            TaskKind::MultilabelClassification => !has(LabelKind::Continuous),
            TaskKind::Regression => !has(LabelKind::Binary),
            TaskKind::Joint => true,
        };
        if !consistent {
            return Err(Error::Manifest(format!(
                "task `{}`: label kinds do not match task kind {:?}",
                self.name, self.kind
            )));
        }
        for (subset, idx) in &self.eval_subsets {
            if idx.is_empty() || idx.iter().any(|&i| i >= self.n_labels()) {
                return Err(Error::Manifest(format!(
                    "task `{}`: eval subset `{subset}` has an invalid label index",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Targets `[records × labels]` with a presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    n_rows: usize,
    kinds: Vec<LabelKind>,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl LabelMatrix {
    pub fn new(kinds: Vec<LabelKind>, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n_labels = kinds.len();
        if n_labels == 0 || values.len() != mask.len() || values.len() % n_labels != 0 {
            return Err(Error::shape(
                "label_matrix",
                format!("{} values, {} mask cells, {n_labels} labels", values.len(), mask.len()),
            ));
        }
        for (i, (&v, &m)) in values.iter().zip(&mask).enumerate() {
            if !m {
                continue;
            }
            let ok = match kinds[i % n_labels] {
                LabelKind::Binary => v == 0.0 || v == 1.0,
                LabelKind::Continuous => v.is_finite(),
            };
            if !ok {
                return Err(Error::InvalidParameter(format!(
                    "label value {v} at row {} column {} is invalid for {:?}",
                    i / n_labels,
                    i % n_labels,
                    kinds[i % n_labels]
                )));
            }
        }
        Ok(LabelMatrix {
            n_rows: values.len() / n_labels,
            kinds,
            values,
            mask,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_labels(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[LabelKind] {
        &self.kinds
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, row: usize, label: usize) -> Option<f64> {
        let i = row * self.n_labels() + label;
        self.mask[i].then(|| self.values[i])
    }

    pub fn row_values(&self, row: usize) -> &[f64] {
        &self.values[row * self.n_labels()..][..self.n_labels()]
    }

    pub fn row_mask(&self, row: usize) -> &[bool] {
        &self.mask[row * self.n_labels()..][..self.n_labels()]
    }

    /// Present values of one label column.
    pub fn column(&self, label: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_rows).filter_map(move |r| self.get(r, label))
    }

    pub fn select_rows(&self, rows: &[usize]) -> LabelMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_labels());
        let mut mask = Vec::with_capacity(rows.len() * self.n_labels());
        for &r in rows {
            values.extend_from_slice(self.row_values(r));
            mask.extend_from_slice(self.row_mask(r));
        }
        LabelMatrix {
            n_rows: rows.len(),
            kinds: self.kinds.clone(),
            values,
            mask,
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<LabelMatrix> {
        if cols.is_empty() || cols.iter().any(|&c| c >= self.n_labels()) {
            return Err(Error::InvalidParameter(format!("column subset {cols:?} is invalid")));
        }
        let mut values = Vec::with_capacity(self.n_rows * cols.len());
        let mut mask = Vec::with_capacity(self.n_rows * cols.len());
        for r in 0..self.n_rows {
            for &c in cols {
                values.push(self.values[r * self.n_labels() + c]);
                mask.push(self.mask[r * self.n_labels() + c]);
            }
        }
        Ok(LabelMatrix {
            n_rows: self.n_rows,
            kinds: cols.iter().map(|&c| self.kinds[c]).collect(),
            values,
            mask,
        })
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> LabelMatrix {
        assert_eq!(values.len(), self.values.len());
        LabelMatrix {
            values,
            ..self.clone()
        }
    }
}
