//! Finetuning, frozen evaluation and linear evaluation of a backbone.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::backbones::{
    backbone_forward, head_forward, infer, update_running_stats, BackboneOutput, Bound, HeadConfig, HeadKind,
    Inference, ModelWeights, NormMode, ParamRole,
};
use crate::dataio::{
    apply_znorm, fit_znorm, random_crop, sliding_windows, stack_records, Dataset, EcgRecord, LabelKind, LabelMatrix,
    Split, ZNormStats,
};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::stats::{Metric, PredictionSet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    FinetuneLinearHead,
    FrozenQueryHead,
    LinearProbe,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 3] = [
        ProtocolKind::FinetuneLinearHead,
        ProtocolKind::FrozenQueryHead,
        ProtocolKind::LinearProbe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::FinetuneLinearHead => "finetune_linear_head",
            ProtocolKind::FrozenQueryHead => "frozen_query_head",
            ProtocolKind::LinearProbe => "linear_probe",
        }
    }

    pub fn trains_backbone(self) -> bool {
        self == ProtocolKind::FinetuneLinearHead
    }

    pub fn head_kind(self) -> HeadKind {
        match self {
            ProtocolKind::FrozenQueryHead => HeadKind::QueryAttention,
            _ => HeadKind::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head_lr: f64,
    pub weight_decay: f64,
    /// Divisors of the head rate for the lower and upper backbone halves.
    pub layer_group_factors: (f64, f64),
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Chosen from the label kinds when `None`.
    #[serde(default)]
    pub selection_metric: Option<Metric>,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head_lr: 1e-3,
            weight_decay: 1e-3,
            layer_group_factors: (100.0, 10.0),
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            selection_metric: None,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.layer_group_factors;
        if !(self.head_lr > 0.0) || !(lo > 0.0) || !(hi > 0.0) {
            return Err(Error::Config("head_lr and layer group factors must be positive".into()));
        }
        if self.batch_size == 0 || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("batch_size must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Partition of the trainable parameters with one learning rate each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroups {
    pub lower: Vec<String>,
    pub upper: Vec<String>,
    pub head: Vec<String>,
    /// Rates of `lower`, `upper` and `head`.
    pub lrs: [f64; 3],
}

impl ParamGroups {
    pub fn lr_map(&self) -> BTreeMap<String, f64> {
        [&self.lower, &self.upper, &self.head]
            .into_iter()
            .zip(self.lrs)
            .flat_map(|(paths, lr)| paths.iter().map(move |p| (p.clone(), lr)))
            .collect()
    }
}

/// Layers `0..n/2` form the lower group, the rest the upper group; head
/// parameters form the third group.
pub fn build_param_groups(weights: &ModelWeights, cfg: &TrainConfig) -> ParamGroups {
    let split = weights.config.n_layers() / 2;
    let (lo, hi) = cfg.layer_group_factors;
    let mut g = ParamGroups {
        lower: Vec::new(),
        upper: Vec::new(),
        head: Vec::new(),
        lrs: [cfg.head_lr / lo, cfg.head_lr / hi, cfg.head_lr],
    };
    for spec in weights.param_specs() {
        if spec.role != ParamRole::Trainable {
            continue;
        }
        match spec.layer {
            Some(l) if l < split => g.lower.push(spec.path),
            Some(_) => g.upper.push(spec.path),
            None => g.head.push(spec.path),
        }
    }
    g
}

/// Binary cross-entropy over present binary cells plus absolute error over
/// present continuous cells, each a per-cell mean. `targets` must already be
/// z-normalized. `None` when the batch has no present cell.
pub fn multitask_loss(g: &mut Graph, outputs: Var, targets: &LabelMatrix) -> Result<Option<Var>> {
    let kinds = targets.kinds();
    let k = kinds.len();
    let cell_mask = |kind: LabelKind| -> Vec<bool> {
        targets
            .mask()
            .iter()
            .enumerate()
            .map(|(i, &m)| m && kinds[i % k] == kind)
            .collect()
    };
    let bce = g.masked_bce(outputs, targets.values(), &cell_mask(LabelKind::Binary))?;
    let l1 = g.masked_l1(outputs, targets.values(), &cell_mask(LabelKind::Continuous))?;
    Ok(match (bce, l1) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    })
}

/// Mean raw head output over the non-overlapping crop-length windows of each
/// record: logits for binary labels, z-values for continuous ones.
pub fn predict_records(weights: &ModelWeights, records: &[EcgRecord], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let crop_s = weights.config.crop_s;
    let mut windows = Vec::new();
    let mut owner = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let w = sliding_windows(r, crop_s)?;
        owner.extend(std::iter::repeat_n(i, w.len()));
        windows.extend(w);
    }
    let n_out = weights
        .head
        .map(|h| h.n_outputs)
        .ok_or_else(|| Error::Weights("model has no head".into()))?;
    let step = batch_size.max(1);
    let outputs: Vec<Tensor> = windows
        .par_chunks(step)
        .map(|chunk| {
            let x = stack_records(chunk)?;
            Ok(infer(weights, &x, chunk[0].sampling_rate())?.outputs.expect("model has a head"))
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![vec![0.0; n_out]; records.len()];
    let mut counts = vec![0usize; records.len()];
    for (out, own) in outputs.iter().zip(owner.chunks(step)) {
        for (row, &i) in out.data().chunks(n_out).zip(own) {
            for (s, v) in sums[i].iter_mut().zip(row) {
                *s += v;
            }
            counts[i] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect())
}

pub fn predict_record(weights: &ModelWeights, record: &EcgRecord) -> Result<Vec<f64>> {
    Ok(predict_records(weights, std::slice::from_ref(record), 32)?.remove(0))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores for reporting: probabilities for binary labels, z-values for
/// continuous labels, with targets z-normalized the same way. Labels that
/// cannot be normalized are masked out.
pub fn to_prediction_set(
    model_id: &str,
    task_id: &str,
    label_names: &[String],
    record_ids: Vec<String>,
    raw: &[Vec<f64>],
    targets: &LabelMatrix,
    znorm: &ZNormStats,
) -> Result<PredictionSet> {
    let k = targets.n_labels();
    if raw.len() != targets.n_rows() || raw.iter().any(|r| r.len() != k) || record_ids.len() != raw.len() {
        return Err(Error::shape("to_prediction_set", "outputs, targets and record ids differ in size"));
    }
    let excluded = znorm.excluded();
    let z = apply_znorm(targets, znorm);
    let kinds = targets.kinds().to_vec();
    let mut scores = Vec::with_capacity(raw.len() * k);
    let mut mask = Vec::with_capacity(raw.len() * k);
    for (r, row) in raw.iter().enumerate() {
        for l in 0..k {
            scores.push(match kinds[l] {
                LabelKind::Binary => sigmoid(row[l]),
                LabelKind::Continuous => row[l],
            });
            mask.push(z.get(r, l).is_some() && !excluded.contains(&l));
        }
    }
    let set = PredictionSet {
        model_id: model_id.to_string(),
        task_id: task_id.to_string(),
        record_ids,
        label_names: label_names.to_vec(),
        kinds,
        scores,
        targets: z.values().to_vec(),
        mask,
    };
    set.validate()?;
    Ok(set)
}

/// Column slice of a prediction set.
pub fn evaluate_subset(preds: &PredictionSet, subset: &[usize]) -> Result<PredictionSet> {
    preds.evaluate_subset(subset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_metric: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub weights: ModelWeights,
    pub znorm: ZNormStats,
    pub metric: Metric,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainedModel {
    pub fn best_val_metric(&self) -> Option<f64> {
        self.history.iter().find(|e| e.is_best && Some(e.epoch) == self.best_epoch).map(|e| e.val_metric)
    }
}

/// Copy of `weights` prepared for a protocol: CPC heads removed and a fresh
/// head of the protocol's kind.
pub fn prepare_model(kind: ProtocolKind, weights: &ModelWeights, n_outputs: usize, seed: u64) -> Result<ModelWeights> {
    let mut w = weights.clone();
    w.strip_cpc_heads();
    w.set_head(
        HeadConfig {
            kind: kind.head_kind(),
            n_outputs,
        },
        seed,
    )?;
    Ok(w)
}

/// Validation metric of `weights` on `records`.
pub fn validation_metric(
    weights: &ModelWeights,
    records: &[EcgRecord],
    labels: &LabelMatrix,
    znorm: &ZNormStats,
    metric: Metric,
    batch_size: usize,
) -> Result<f64> {
    let raw = predict_records(weights, records, batch_size)?;
    let ids = records.iter().map(|r| r.record_id().to_string()).collect();
    let names: Vec<String> = (0..labels.n_labels()).map(|l| l.to_string()).collect();
    let preds = to_prediction_set("val", "val", &names, ids, &raw, labels, znorm)?;
    metric.evaluate(&preds, None)
}

/// Frozen backbone outputs of a batch, computed on sub-batches in parallel.
/// Every sample is processed independently, so the result does not depend
/// on the thread count.
fn frozen_features(weights: &ModelWeights, crops: &[EcgRecord]) -> Result<(Tensor, Tensor)> {
    const SUB: usize = 8;
    let parts: Vec<Inference> = crops
        .par_chunks(SUB)
        .map(|c| infer(weights, &stack_records(c)?, c[0].sampling_rate()))
        .collect::<Result<_>>()?;
    let cat = |f: fn(&Inference) -> &Tensor| -> Result<Tensor> {
        let first = f(&parts[0]).shape().to_vec();
        let rows: usize = parts.iter().map(|p| f(p).shape()[0]).sum();
        let mut shape = first;
        shape[0] = rows;
        Tensor::new(&shape, parts.iter().flat_map(|p| f(p).data().iter().copied()).collect())
    };
    Ok((cat(|p| &p.tokens)?, cat(|p| &p.pooled)?))
}

/// Trains under `kind` on the train split and selects the checkpoint with the
/// best validation metric.
pub fn run_protocol(kind: ProtocolKind, weights: &ModelWeights, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    dataset.task.validate()?;
    let (train_x, train_y) = dataset.select(Split::Train)?;
    let (val_x, val_y) = dataset.select(Split::Val)?;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(Error::InvalidParameter("train and validation splits must be non-empty".into()));
    }
    let znorm = fit_znorm(&train_y);
    let train_z = apply_znorm(&train_y, &znorm);
    let metric = cfg.selection_metric.unwrap_or_else(|| Metric::for_kinds(&dataset.task.label_kinds));

    let mut model = prepare_model(kind, weights, dataset.task.n_labels(), cfg.seed.wrapping_add(1))?;
    let groups = build_param_groups(&model, cfg);
    let lrs = groups.lr_map();
    let learn = |path: &str| kind.trains_backbone() || path.starts_with("head.");
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let crop_s = model.config.crop_s;

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelWeights)> = None;
    let mut since_best = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            if kind.trains_backbone() && rows.len() < 2 {
                continue;
            }
            let crops = rows
                .iter()
                .map(|&r| random_crop(&train_x[r], crop_s, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let targets = train_z.select_rows(rows);
            let mut g = Graph::new();
            let bound = Bound::bind(&mut g, &model, |s| learn(&s.path))?;
            let out = if kind.trains_backbone() {
                let xv = g.constant(stack_records(&crops)?);
                backbone_forward(&mut g, &model, &bound, xv, NormMode::Train)?
            } else {
                let (tokens, pooled) = frozen_features(&model, &crops)?;
                let tokens = g.constant(tokens);
                BackboneOutput {
                    tokens,
                    pooled: g.constant(pooled),
                    encoded: tokens,
                    bn_stats: Vec::new(),
                }
            };
            let y = head_forward(&mut g, &model, &bound, &out)?;
            let Some(loss) = multitask_loss(&mut g, y, &targets)? else {
                log::warn!("epoch {epoch}: skipping batch without labelled cells");
                continue;
            };
            sum += g.value(loss).item().expect("scalar");
            batches += 1;
            let mut grads = g.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = bound
                .iter()
                .filter(|(p, _)| learn(p))
                .filter_map(|(p, v)| grads.take(*v).map(|t| (p.clone(), t)))
                .collect();
            adamw_step(&mut model, &grads, &lrs, &mut state, &opt)?;
            if kind.trains_backbone() {
                update_running_stats(&mut model, &out.bn_stats, cfg.bn_momentum)?;
            }
        }
        let val = validation_metric(&model, &val_x, &val_y, &znorm, metric, cfg.batch_size)?;
        let improved = best.as_ref().is_none_or(|(_, b, _)| metric.better(val, *b));
        history.push(EpochRecord {
            epoch,
            train_loss: (batches > 0).then(|| sum / batches as f64),
            val_metric: val,
            is_best: improved,
        });
        log::info!("{} epoch {epoch}: val {} {val:.4}", kind.as_str(), metric.as_str());
        if improved {
            best = Some((epoch, val, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, weights) = match best {
        Some((e, _, w)) => (Some(e), w),
        None => (None, model),
    };
    let mut weights = weights;
    weights.provenance.stage = kind.as_str().into();
    Ok(TrainedModel {
        weights,
        znorm,
        metric,
        history,
        best_epoch,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Test-split predictions of a trained model.
pub fn predict_split(model: &TrainedModel, dataset: &Dataset, split: Split, model_id: &str, batch_size: usize) -> Result<PredictionSet> {
    let (records, labels) = dataset.select(split)?;
    let raw = predict_records(&model.weights, &records, batch_size)?;
    let ids = records.iter().map(|r| r.record_id().to_string()).collect();
    to_prediction_set(
        model_id,
        &dataset.task.name,
        &dataset.task.label_names,
        ids,
        &raw,
        &labels,
        &model.znorm,
    )
}
