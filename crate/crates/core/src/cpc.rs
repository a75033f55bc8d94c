//! Contrastive predictive coding for the ECG-CPC backbone.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{
    backbone_forward, update_running_stats, BackboneConfig, BackboneKind, Bound, ModelWeights, NormMode,
};
use crate::dataio::{random_crop, stack_records, EcgRecord};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpcConfig {
    pub steps_ahead: usize,
    pub negatives_per_positive: usize,
    /// Anchors sampled per step offset; all valid anchors when `None`.
    #[serde(default)]
    pub anchors_per_step: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for CpcConfig {
    fn default() -> Self {
        CpcConfig {
            steps_ahead: 14,
            negatives_per_positive: 15,
            anchors_per_step: None,
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 1e-3,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl CpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_ahead == 0 || self.negatives_per_positive == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "steps_ahead, negatives_per_positive and batch_size must be at least 1".into(),
            ));
        }
        if self.anchors_per_step == Some(0) {
            return Err(Error::Config("anchors_per_step must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("lr, weight_decay and bn_momentum out of range".into()));
        }
        Ok(())
    }
}

/// One InfoNCE term: flat `batch * T + time` indices of the anchor context,
/// its true future encoding and the negative encodings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CpcSample {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Draws samples for step offset `k` on a `[batch, ·, t]` token grid.
/// Negatives are uniform without replacement over every other position.
pub fn sample_step<R: Rng>(
    batch: usize,
    t: usize,
    k: usize,
    negatives: usize,
    anchors: Option<usize>,
    rng: &mut R,
) -> Result<Vec<CpcSample>> {
    if k == 0 || t <= k {
        return Err(Error::InvalidParameter(format!("sequence of {t} tokens cannot predict {k} steps ahead")));
    }
    let total = batch * t;
    if negatives >= total {
        return Err(Error::InvalidParameter(format!(
            "{negatives} negatives need more than {total} token positions"
        )));
    }
    let valid = batch * (t - k);
    let chosen: Vec<usize> = match anchors {
        Some(a) if a < valid => {
            let mut v = index::sample(rng, valid, a).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..valid).collect(),
    };
    Ok(chosen
        .into_iter()
        .map(|i| {
            let (b, s) = (i / (t - k), i % (t - k));
            let anchor = b * t + s;
            let positive = anchor + k;
            let negatives = index::sample(rng, total - 1, negatives)
                .into_iter()
                .map(|j| if j >= positive { j + 1 } else { j })
                .collect();
            CpcSample {
                anchor,
                positive,
                negatives,
            }
        })
        .collect())
}

/// Mean cross-entropy of picking the positive among `{positive} ∪ negatives`
/// by dot-product similarity. Column `j` of `pred: [1, D, M]` is the
/// prediction for `samples[j]`; candidates index into `enc: [B, D, T]`.
pub fn contrastive_loss(g: &mut Graph, pred: Var, enc: Var, samples: &[CpcSample]) -> Result<Var> {
    let k = samples
        .first()
        .map(|s| 1 + s.negatives.len())
        .ok_or_else(|| Error::InvalidParameter("no contrastive samples".into()))?;
    if samples.iter().any(|s| s.negatives.len() + 1 != k) {
        return Err(Error::InvalidParameter("samples differ in negative count".into()));
    }
    let mut pairs = Vec::with_capacity(samples.len() * k);
    for (j, s) in samples.iter().enumerate() {
        pairs.push((j, s.positive));
        pairs.extend(s.negatives.iter().map(|&n| (j, n)));
    }
    let logits = g.pair_dot(pred, enc, pairs)?;
    let logits = g.reshape(logits, &[samples.len(), k])?;
    g.cross_entropy(logits, &vec![0; samples.len()])
}

/// InfoNCE averaged over step offsets `1..=heads.len()`. `context` and
/// `encoded` are time-aligned `[B, D, T]`; `heads[k-1]` maps context to the
/// prediction of the encoding `k` steps ahead.
pub fn infonce_loss<R: Rng>(
    g: &mut Graph,
    context: Var,
    encoded: Var,
    heads: &[Var],
    cfg: &CpcConfig,
    rng: &mut R,
) -> Result<Var> {
    let (cs, es) = (g.shape(context).to_vec(), g.shape(encoded).to_vec());
    if cs.len() != 3 || cs != es {
        return Err(Error::shape("infonce_loss", format!("context {cs:?}, encoded {es:?}")));
    }
    let (b, t) = (cs[0], cs[2]);
    if t < heads.len() + 1 {
        return Err(Error::InvalidParameter(format!(
            "{t} tokens are too few for {} steps ahead",
            heads.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (i, &w) in heads.iter().enumerate() {
        let samples = sample_step(b, t, i + 1, cfg.negatives_per_positive, cfg.anchors_per_step, rng)?;
        let anchors = g.gather_positions(context, samples.iter().map(|s| s.anchor).collect())?;
        let pred = g.conv1d(anchors, w, 1, (0, 0))?;
        let loss = contrastive_loss(g, pred, encoded, &samples)?;
        total = Some(match total {
            Some(acc) => g.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidParameter("no prediction heads".into()))?;
    Ok(g.scale(total, 1.0 / heads.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub epoch: usize,
    /// Mean training loss; empty for the initial evaluation row.
    pub train_loss: Option<f64>,
    pub holdout_loss: f64,
    pub wall_time_s: f64,
}

fn head_vars(bound: &Bound, steps: usize) -> Result<Vec<Var>> {
    (1..=steps).map(|k| bound.var(&format!("cpc.predict.{k}.weight"))).collect()
}

fn crops<R: Rng>(records: &[&EcgRecord], samples: usize, rate: u32, rng: &mut R) -> Result<Tensor> {
    let duration = samples as f64 / f64::from(rate);
    let crops: Vec<EcgRecord> = records
        .iter()
        .map(|r| random_crop(r, duration, rng))
        .collect::<Result<_>>()?;
    stack_records(&crops)
}

/// Mean InfoNCE loss on fixed crops and negatives of `records`, using frozen
/// normalization statistics.
pub fn holdout_loss(weights: &ModelWeights, records: &[EcgRecord], cfg: &CpcConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_401d);
    let samples = weights.config.crop_samples();
    let mut sum = 0.0;
    let mut batches = 0usize;
    let refs: Vec<&EcgRecord> = records.iter().collect();
    for chunk in refs.chunks(cfg.batch_size) {
        let x = crops(chunk, samples, weights.config.input_hz, &mut rng)?;
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, weights, |_| false)?;
        let xv = g.constant(x);
        let out = backbone_forward(&mut g, weights, &bound, xv, NormMode::Frozen)?;
        let heads = head_vars(&bound, weights.cpc_steps)?;
        let loss = infonce_loss(&mut g, out.tokens, out.encoded, &heads, cfg, &mut rng)?;
        sum += g.value(loss).item().expect("scalar");
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::InvalidParameter("no holdout records".into()));
    }
    Ok(sum / batches as f64)
}

/// Pretrains an ECG-CPC backbone. Returns weights holding the backbone and
/// the CPC prediction heads, plus one log row per epoch after an initial
/// evaluation row.
pub fn pretrain_cpc(
    train: &[EcgRecord],
    holdout: &[EcgRecord],
    backbone: &BackboneConfig,
    cfg: &CpcConfig,
) -> Result<(ModelWeights, Vec<PretrainLogRow>)> {
    cfg.validate()?;
    if backbone.kind != BackboneKind::EcgCpc {
        return Err(Error::Config(format!("CPC pretraining needs an ecg_cpc backbone, got {}", backbone.kind.as_str())));
    }
    if train.is_empty() {
        return Err(Error::InvalidParameter("no training records".into()));
    }
    if let Some(r) = train.iter().chain(holdout).find(|r| r.sampling_rate() != backbone.input_hz) {
        return Err(Error::InvalidParameter(format!(
            "record `{}` is at {} Hz, backbone expects {} Hz",
            r.record_id(),
            r.sampling_rate(),
            backbone.input_hz
        )));
    }
    let mut weights = ModelWeights::init(backbone, None, cfg.seed)?;
    weights.add_cpc_heads(cfg.steps_ahead, cfg.seed.wrapping_add(2));
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let eval = |w: &ModelWeights| if holdout.is_empty() { Ok(f64::NAN) } else { holdout_loss(w, holdout, cfg) };
    log.push(PretrainLogRow {
        epoch: 0,
        train_loss: None,
        holdout_loss: eval(&weights)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    });

    let lrs: BTreeMap<String, f64> = weights.param_specs().into_iter().map(|s| (s.path, cfg.lr)).collect();
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = backbone.crop_samples();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<&EcgRecord> = train.iter().collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && batches > 0 {
                continue;
            }
            let x = crops(chunk, samples, backbone.input_hz, &mut rng)?;
            let mut g = Graph::new();
            let bound = Bound::bind(&mut g, &weights, |_| true)?;
            let xv = g.constant(x);
            let out = backbone_forward(&mut g, &weights, &bound, xv, NormMode::Train)?;
            let heads = head_vars(&bound, cfg.steps_ahead)?;
            let loss = infonce_loss(&mut g, out.tokens, out.encoded, &heads, cfg, &mut rng)?;
            sum += g.value(loss).item().expect("scalar");
            batches += 1;
            let mut grads = g.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = bound
                .iter()
                .filter_map(|(p, v)| grads.take(*v).map(|t| (p.clone(), t)))
                .collect();
            adamw_step(&mut weights, &grads, &lrs, &mut state, &opt)?;
            update_running_stats(&mut weights, &out.bn_stats, cfg.bn_momentum)?;
        }
        let row = PretrainLogRow {
            epoch,
            train_loss: Some(sum / batches.max(1) as f64),
            holdout_loss: eval(&weights)?,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "cpc epoch {epoch}: train {:.4} holdout {:.4}",
            row.train_loss.unwrap_or(f64::NAN),
            row.holdout_loss
        );
        log.push(row);
    }
    weights.provenance.stage = "cpc_pretrain".into();
    weights.provenance.notes.push(format!(
        "{} epochs, {} steps ahead, {} negatives",
        cfg.epochs, cfg.steps_ahead, cfg.negatives_per_positive
    ));
    Ok((weights, log))
}

pub fn write_pretrain_log(path: &Path, rows: &[PretrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
