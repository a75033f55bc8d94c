use serde::{Deserialize, Serialize};

use super::task::{LabelKind, LabelMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZNormStatus {
    Normalized,
    /// Binary labels pass through untouched.
    Binary,
    /// Fewer than two present training values.
    TooFewValues,
    ZeroVariance,
}

/// Per-label training statistics, using the population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZNormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub status: Vec<ZNormStatus>,
}

impl ZNormStats {
    pub fn is_normalized(&self, label: usize) -> bool {
        self.status[label] == ZNormStatus::Normalized
    }

    /// Continuous labels that cannot be normalized and must be left out.
    pub fn excluded(&self) -> Vec<usize> {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, ZNormStatus::TooFewValues | ZNormStatus::ZeroVariance))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn normalize(&self, label: usize, v: f64) -> f64 {
        if self.is_normalized(label) {
            (v - self.mean[label]) / self.std[label]
        } else {
            v
        }
    }

    pub fn denormalize(&self, label: usize, z: f64) -> f64 {
        if self.is_normalized(label) {
            z * self.std[label] + self.mean[label]
        } else {
            z
        }
    }
}

/// Statistics over mask-true entries of each continuous label.
pub fn fit_znorm(train: &LabelMatrix) -> ZNormStats {
    let k = train.n_labels();
    let mut stats = ZNormStats {
        mean: vec![0.0; k],
        std: vec![1.0; k],
        status: vec![ZNormStatus::Binary; k],
    };
    for (l, kind) in train.kinds().iter().enumerate() {
        if *kind == LabelKind::Binary {
            continue;
        }
        let vals: Vec<f64> = train.column(l).collect();
        if vals.len() < 2 {
            stats.status[l] = ZNormStatus::TooFewValues;
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        stats.mean[l] = mean;
        let std = var.sqrt();
        // Guard against variance that is zero up to rounding.
        if std <= 1e-12 * mean.abs().max(1.0) {
            stats.status[l] = ZNormStatus::ZeroVariance;
        } else {
            stats.std[l] = std;
            stats.status[l] = ZNormStatus::Normalized;
        }
    }
    stats
}

/// Normalizes the present entries of every normalized label.
pub fn apply_znorm(values: &LabelMatrix, stats: &ZNormStats) -> LabelMatrix {
    map_present(values, |l, v| stats.normalize(l, v))
}

pub fn inverse_znorm(values: &LabelMatrix, stats: &ZNormStats) -> LabelMatrix {
    map_present(values, |l, v| stats.denormalize(l, v))
}

fn map_present(m: &LabelMatrix, f: impl Fn(usize, f64) -> f64) -> LabelMatrix {
    let k = m.n_labels();
    let out = m
        .values()
        .iter()
        .zip(m.mask())
        .enumerate()
        .map(|(i, (&v, &present))| if present { f(i % k, v) } else { v })
        .collect();
    m.with_values(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(vals: &[Option<f64>]) -> LabelMatrix {
        LabelMatrix::new(
            vec![LabelKind::Continuous],
            vals.iter().map(|v| v.unwrap_or(0.0)).collect(),
            vals.iter().map(Option::is_some).collect(),
        )
        .unwrap()
    }

    #[test]
    fn population_std() {
        let s = fit_znorm(&col(&[Some(1.0), Some(2.0), Some(3.0)]));
        assert_eq!(s.mean[0], 2.0);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let z = apply_znorm(&col(&[Some(1.0), Some(2.0), Some(3.0)]), &s);
        assert!(z.values().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn constant_label_is_flagged() {
        let m = col(&[Some(5.0), Some(5.0), Some(5.0)]);
        let s = fit_znorm(&m);
        assert_eq!(s.status[0], ZNormStatus::ZeroVariance);
        assert_eq!(s.excluded(), vec![0]);
        assert_eq!(apply_znorm(&m, &s), m);
    }

    #[test]
    fn masked_entries_ignored() {
        let s = fit_znorm(&col(&[Some(1.0), Some(2.0), None]));
        assert_eq!(s.mean[0], 1.5);
        assert_eq!(s.std[0], 0.5);
        assert_eq!(fit_znorm(&col(&[Some(1.0), None])).status[0], ZNormStatus::TooFewValues);
    }

    #[test]
    fn binary_passes_through() {
        let m = LabelMatrix::new(vec![LabelKind::Binary], vec![0.0, 1.0, 1.0], vec![true; 3]).unwrap();
        let s = fit_znorm(&m);
        assert_eq!(s.status[0], ZNormStatus::Binary);
        assert!(s.excluded().is_empty());
        assert_eq!(apply_znorm(&m, &s), m);
    }
}
