use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::Metric;
use super::predictions::PredictionSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_iterations: 1000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!(
                "bootstrap needs n_iterations >= 1 and confidence in (0, 1), got {} and {}",
                self.n_iterations, self.confidence
            )));
        }
        Ok(())
    }
}

/// Point estimate with a percentile interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// Replicates on which the metric was defined.
    pub n_valid: usize,
}

/// Linear-interpolation quantile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resample indices for replicate `i`, independent of evaluation order.
fn resample(seed: u64, i: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn interval(point: f64, mut reps: Vec<f64>, confidence: f64) -> Result<Interval> {
    if reps.is_empty() {
        return Err(Error::Undefined("metric undefined on every bootstrap replicate".into()));
    }
    reps.sort_by(f64::total_cmp);
    let alpha = 1.0 - confidence;
    Ok(Interval {
        point,
        lower: percentile(&reps, alpha / 2.0),
        upper: percentile(&reps, 1.0 - alpha / 2.0),
        n_valid: reps.len(),
    })
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn bootstrap_metric(preds: &PredictionSet, metric: Metric, cfg: &BootstrapConfig) -> Result<Interval> {
    cfg.validate()?;
    preds.validate()?;
    let n = preds.n_records();
    if n == 0 {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    let point = metric.evaluate(preds, None)?;
    let reps: Vec<Option<f64>> = (0..cfg.n_iterations)
        .into_par_iter()
        .map(|i| defined(metric.evaluate(preds, Some(&resample(cfg.seed, i, n)))))
        .collect::<Result<_>>()?;
    interval(point, reps.into_iter().flatten().collect(), cfg.confidence)
}

/// Bootstrap of `metric(a) - metric(b)` with shared resamples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub difference: Interval,
    /// The interval excludes zero.
    pub significant: bool,
}

pub fn paired_significance(
    a: &PredictionSet,
    b: &PredictionSet,
    metric: Metric,
    cfg: &BootstrapConfig,
) -> Result<PairedResult> {
    cfg.validate()?;
    a.validate()?;
    b.validate()?;
    if a.record_ids != b.record_ids {
        return Err(Error::InvalidParameter(format!(
            "`{}` and `{}` differ in record order",
            a.model_id, b.model_id
        )));
    }
    let n = a.n_records();
    if n == 0 {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    let point = metric.evaluate(a, None)? - metric.evaluate(b, None)?;
    let reps: Vec<Option<f64>> = (0..cfg.n_iterations)
        .into_par_iter()
        .map(|i| {
            let rows = resample(cfg.seed, i, n);
            let ma = defined(metric.evaluate(a, Some(&rows)))?;
            let mb = defined(metric.evaluate(b, Some(&rows)))?;
            Ok(ma.zip(mb).map(|(x, y)| x - y))
        })
        .collect::<Result<_>>()?;
    let difference = interval(point, reps.into_iter().flatten().collect(), cfg.confidence)?;
    Ok(PairedResult {
        significant: difference.lower > 0.0 || difference.upper < 0.0,
        difference,
    })
}

/// `better[i][j]`: model `i` is significantly better than model `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceMatrix {
    pub model_ids: Vec<String>,
    pub better: Vec<Vec<bool>>,
    /// Interval of `metric(i) - metric(j)` for `i != j`.
    pub difference: Vec<Vec<Option<Interval>>>,
}

impl SignificanceMatrix {
    /// A matrix from explicit relations, checking asymmetry.
    pub fn from_better(model_ids: Vec<String>, better: Vec<Vec<bool>>) -> Result<Self> {
        let n = model_ids.len();
        if better.len() != n || better.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidParameter("significance matrix is not square".into()));
        }
        for i in 0..n {
            if better[i][i] {
                return Err(Error::InvalidParameter("model better than itself".into()));
            }
            for j in 0..n {
                if better[i][j] && better[j][i] {
                    return Err(Error::InvalidParameter(format!(
                        "`{}` and `{}` are each better than the other",
                        model_ids[i], model_ids[j]
                    )));
                }
            }
        }
        Ok(SignificanceMatrix {
            model_ids,
            difference: vec![vec![None; n]; n],
            better,
        })
    }

    pub fn len(&self) -> usize {
        self.model_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_ids.is_empty()
    }
}

/// Pairwise paired-bootstrap comparisons of models evaluated on one task.
pub fn significance_matrix(models: &[PredictionSet], metric: Metric, cfg: &BootstrapConfig) -> Result<SignificanceMatrix> {
    let n = models.len();
    let mut better = vec![vec![false; n]; n];
    let mut difference = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = paired_significance(&models[i], &models[j], metric, cfg)?;
            let d = r.difference;
            difference[i][j] = Some(d);
            difference[j][i] = Some(Interval {
                point: -d.point,
                lower: -d.upper,
                upper: -d.lower,
                n_valid: d.n_valid,
            });
            if r.significant {
                let i_wins = metric.better(d.point, 0.0);
                better[i][j] = i_wins;
                better[j][i] = !i_wins;
            }
        }
    }
    Ok(SignificanceMatrix {
        model_ids: models.iter().map(|m| m.model_id.clone()).collect(),
        better,
        difference,
    })
}
