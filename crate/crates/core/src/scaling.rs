//! Power-law fits `C·N^(-α) + L0` of error against training-set size.

use serde::{Deserialize, Serialize};

use crate::adapt::{predict_split, run_protocol, ProtocolKind, TrainConfig};
use crate::backbones::ModelWeights;
use crate::dataio::{stratified_subsample, Dataset, Split};
use crate::error::{Error, Result};
use crate::stats::macro_auroc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    /// `1 - macro-AUROC`.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub model_id: String,
    pub c: f64,
    pub alpha: f64,
    pub l0: f64,
    /// `None` when the losses have zero variance.
    pub r_squared: Option<f64>,
    /// Local refinement stopped without meeting its tolerance.
    pub converged: bool,
}

impl ScalingFit {
    pub fn new(model_id: &str, c: f64, alpha: f64, l0: f64) -> Self {
        ScalingFit {
            model_id: model_id.to_string(),
            c,
            alpha,
            l0,
            r_squared: None,
            converged: true,
        }
    }
}

pub fn loss_at(fit: &ScalingFit, n: f64) -> f64 {
    fit.c * n.powf(-fit.alpha) + fit.l0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyResult {
    pub n: f64,
    pub n_star: f64,
    pub r: f64,
}

/// Size `N*` at which `model` reaches the reference loss at `n`, and `N*/n`.
pub fn label_efficiency(model: &ScalingFit, reference: &ScalingFit, n: f64) -> Result<EfficiencyResult> {
    let target = loss_at(reference, n);
    if model.alpha == 0.0 {
        return Err(Error::FlatCurve);
    }
    if target <= model.l0 {
        return Err(Error::Saturated { target, l0: model.l0 });
    }
    let n_star = ((target - model.l0) / model.c).powf(-1.0 / model.alpha);
    Ok(EfficiencyResult { n, n_star, r: n_star / n })
}

const ALPHA_MAX: f64 = 3.0;
const GRID_ALPHA: usize = 301;
const GRID_L0: usize = 101;

fn sse(ns: &[f64], ys: &[f64], c: f64, alpha: f64, l0: f64) -> f64 {
    ns.iter()
        .zip(ys)
        .map(|(n, y)| (c * n.powf(-alpha) + l0 - y).powi(2))
        .sum()
}

/// Least-squares `C` for fixed `α` and `L0`, kept positive.
fn best_c(ns: &[f64], ys: &[f64], alpha: f64, l0: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (n, y) in ns.iter().zip(ys) {
        let x = n.powf(-alpha);
        num += x * (y - l0);
        den += x * x;
    }
    (num / den).max(f64::MIN_POSITIVE)
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut x = [0.0; 3];
    for (i, xi) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][i] = b[r];
        }
        *xi = det(m) / d;
    }
    Some(x)
}

fn clamp_params(p: [f64; 3]) -> [f64; 3] {
    [p[0].max(f64::MIN_POSITIVE), p[1].clamp(0.0, ALPHA_MAX), p[2].max(0.0)]
}

/// Bounded Levenberg-Marquardt on `(C, α, L0)`. Returns the refined
/// parameters and whether the step tolerance was met.
fn refine(ns: &[f64], ys: &[f64], start: [f64; 3]) -> ([f64; 3], bool) {
    let mut p = start;
    let mut cost = sse(ns, ys, p[0], p[1], p[2]);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (n, y) in ns.iter().zip(ys) {
            let x = n.powf(-p[1]);
            let r = p[0] * x + p[2] - y;
            let j = [x, -p[0] * n.ln() * x, 1.0];
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut m = jtj;
            for (a, row) in m.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(1e-12);
            }
            let Some(step) = solve3(m, [-jtr[0], -jtr[1], -jtr[2]]) else {
                lambda *= 10.0;
                continue;
            };
            let cand = clamp_params([p[0] + step[0], p[1] + step[1], p[2] + step[2]]);
            let c = sse(ns, ys, cand[0], cand[1], cand[2]);
            if c <= cost {
                let moved = (0..3).map(|i| (cand[i] - p[i]).abs() / p[i].abs().max(1e-8)).fold(0.0, f64::max);
                p = cand;
                let done = cost - c <= 1e-30 + 1e-15 * cost || moved < 1e-13;
                cost = c;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if done {
                    return (p, true);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no descent direction left within the bounds
            return (p, true);
        }
    }
    (p, false)
}

/// Fits `C·N^(-α) + L0` with `C > 0`, `α ≥ 0`, `L0 ≥ 0` by a log grid over
/// `(α, L0)` with closed-form `C`, refined by bounded Levenberg-Marquardt.
pub fn fit_scaling_law(model_id: &str, points: &[ScalingPoint]) -> Result<ScalingFit> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.n as f64, p.loss)).collect();
    if pts.iter().any(|(n, l)| *n < 1.0 || !l.is_finite()) {
        return Err(Error::InvalidParameter("scaling points need N >= 1 and finite loss".into()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut distinct: Vec<f64> = pts.iter().map(|p| p.0).collect();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 distinct N, got {}",
            distinct.len()
        )));
    }
    let ns: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);

    let mut best = (f64::INFINITY, [1.0, 0.0, 0.0]);
    for i in 0..GRID_ALPHA {
        let alpha = ALPHA_MAX * i as f64 / (GRID_ALPHA - 1) as f64;
        for j in 0..GRID_L0 {
            // denser near zero, reaching the smallest observed loss
            let l0 = y_min * ((j as f64 / (GRID_L0 - 1) as f64).powi(2));
            let c = best_c(&ns, &ys, alpha, l0);
            let s = sse(&ns, &ys, c, alpha, l0);
            if s < best.0 {
                best = (s, [c, alpha, l0]);
            }
        }
    }
    let (p, converged) = refine(&ns, &ys, best.1);
    if !converged {
        log::warn!("scaling fit for `{model_id}` did not converge; using the best iterate");
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res = sse(&ns, &ys, p[0], p[1], p[2]);
    Ok(ScalingFit {
        model_id: model_id.to_string(),
        c: p[0],
        alpha: p[1],
        l0: p[2],
        r_squared: (ss_tot > f64::EPSILON * mean * mean * ys.len() as f64).then(|| 1.0 - ss_res / ss_tot),
        converged,
    })
}

/// Training fractions `1, 1/2, …, 2^-halvings`.
pub fn power_of_two_fractions(halvings: u32) -> Vec<f64> {
    (0..=halvings).map(|k| 0.5f64.powi(k as i32)).collect()
}

/// One measured point of a scaling experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRun {
    pub model_id: String,
    pub fraction: f64,
    pub seed: u64,
    pub n: usize,
    pub loss: f64,
}

/// Adapts `weights` on stratified subsamples of the train and validation
/// splits and records `1 - macro-AUROC` on the full test split.
pub fn run_scaling_experiment(
    model_id: &str,
    weights: &ModelWeights,
    kind: ProtocolKind,
    dataset: &Dataset,
    fractions: &[f64],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<Vec<ScalingRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for &fraction in fractions {
            let mut sub = dataset.clone();
            sub.split = stratified_subsample(&dataset.split, fraction, seed)?;
            let tc = TrainConfig { seed, ..cfg.clone() };
            let model = run_protocol(kind, weights, &sub, &tc)?;
            let preds = predict_split(&model, &sub, Split::Test, model_id, cfg.batch_size)?;
            let auroc = macro_auroc(&preds, None)?;
            runs.push(ScalingRun {
                model_id: model_id.to_string(),
                fraction,
                seed,
                n: sub.split.train.len(),
                loss: 1.0 - auroc,
            });
        }
    }
    Ok(runs)
}

/// Mean loss per training-set size over seeds.
pub fn aggregate_runs(runs: &[ScalingRun]) -> Vec<ScalingPoint> {
    let mut by_n: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in runs {
        let e = by_n.entry(r.n).or_default();
        e.0 += r.loss;
        e.1 += 1;
    }
    by_n
        .into_iter()
        .rev()
        .map(|(n, (s, c))| ScalingPoint { n, loss: s / c as f64 })
        .collect()
}
