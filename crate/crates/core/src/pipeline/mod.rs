//! Declarative end-to-end benchmark runs with resumable, file-backed stages.

mod config;
mod report;

pub use config::{BenchmarkConfig, DatasetSource, ModelInit, ModelSpec, ScalingSpec, CONFIG_VERSION};
pub use report::{
    radar_rows, render_markdown, BenchmarkReport, CurveRow, EfficiencyRow, Environment, MedianRankRow, MetricRow,
    RankRow, SignificanceEntry, ALL_LABELS,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{predict_split, run_protocol, write_history, ProtocolKind};
use crate::backbones::ModelWeights;
use crate::cpc::{pretrain_cpc, write_pretrain_log};
use crate::dataio::{
    dataset_digest, generate_synthetic_dataset, load_dataset, read_manifest, resample, save_dataset, Dataset, LabelKind,
    SignalFormat, Split, TaskSpec,
};
use crate::error::{Error, Result};
use crate::scaling::{
    aggregate_runs, fit_scaling_law, label_efficiency, loss_at, power_of_two_fractions, run_scaling_experiment,
    ScalingFit, ScalingRun,
};
use crate::stats::{
    bootstrap_metric, median_ranks, rank_models, read_predictions, significance_matrix, write_predictions, Metric,
    PredictionSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PrepareData,
    Pretrain,
    Run,
    Stats,
    Scaling,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::PrepareData,
        Stage::Pretrain,
        Stage::Run,
        Stage::Stats,
        Stage::Scaling,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PrepareData => "prepare-data",
            Stage::Pretrain => "pretrain",
            Stage::Run => "run",
            Stage::Stats => "stats",
            Stage::Scaling => "scaling",
            Stage::Report => "report",
        }
    }
}

/// Files a stage reads and writes, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub reads: Vec<String>,
    pub writes: Vec<String>,
}

pub const CONFIG_FILE: &str = "config.json";
pub const DATA_DIR: &str = "data";
pub const DATA_DIGEST: &str = "data/sha256.txt";
pub const METRICS: &str = "metrics.json";
pub const SIGNIFICANCE: &str = "significance.json";
pub const RANKS: &str = "ranks.csv";
pub const MEDIAN_RANKS: &str = "median-ranks.csv";
pub const SCALING_FITS: &str = "scaling-fits.json";
pub const LABEL_EFFICIENCY: &str = "label-efficiency.csv";
pub const SCALING_CURVE: &str = "scaling-curve.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const RADAR: &str = "radar.csv";

pub fn model_weights_path(id: &str) -> String {
    format!("models/{id}/weights.ecgw")
}

pub fn pretrain_log_path(id: &str) -> String {
    format!("models/{id}/pretrain-log.csv")
}

pub fn run_dir(id: &str, protocol: ProtocolKind) -> String {
    format!("runs/{id}/{}", protocol.as_str())
}

pub fn predictions_path(id: &str, protocol: ProtocolKind) -> String {
    format!("{}/predictions.csv", run_dir(id, protocol))
}

pub fn scaling_runs_path(id: &str) -> String {
    format!("scaling/{id}/runs.csv")
}

/// Staged execution of one benchmark config.
pub struct Pipeline {
    cfg: BenchmarkConfig,
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.as_str().into(),
            source: Box::new(e),
        },
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The dataset with every record resampled to `hz`.
fn dataset_at(ds: &Dataset, hz: u32) -> Result<Dataset> {
    if ds.records.iter().all(|r| r.sampling_rate() == hz) {
        return Ok(ds.clone());
    }
    let mut out = ds.clone();
    out.records = ds.records.par_iter().map(|r| resample(r, hz)).collect::<Result<_>>()?;
    Ok(out)
}

/// Evaluation units of a task: the full label set and every subset, each
/// with the metrics its label kinds support.
fn eval_units(task: &TaskSpec) -> Vec<(String, Vec<usize>, Metric)> {
    let mut units = Vec::new();
    let mut push = |name: &str, cols: Vec<usize>| {
        let kinds: Vec<LabelKind> = cols.iter().map(|&c| task.label_kinds[c]).collect();
        if kinds.contains(&LabelKind::Binary) {
            units.push((name.to_string(), cols.clone(), Metric::MacroAuroc));
        }
        if kinds.contains(&LabelKind::Continuous) {
            units.push((name.to_string(), cols, Metric::MeanZMae));
        }
    };
    push(ALL_LABELS, (0..task.n_labels()).collect());
    for (name, cols) in &task.eval_subsets {
        push(name, cols.clone());
    }
    units
}

impl Pipeline {
    pub fn new(cfg: BenchmarkConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg })
    }

    pub fn config(&self) -> &BenchmarkConfig {
        &self.cfg
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    fn pretrained_models(&self) -> impl Iterator<Item = &ModelSpec> {
        self.cfg.models.iter().filter(|m| m.init == ModelInit::Pretrain)
    }

    /// Reads and writes of each stage, without running anything.
    pub fn plan(&self, stages: &[Stage]) -> Vec<StagePlan> {
        let data = vec![format!("{DATA_DIR}/manifest.json"), format!("{DATA_DIR}/labels.csv"), format!("{DATA_DIR}/records/")];
        let weights: Vec<String> = self.cfg.models.iter().map(|m| model_weights_path(&m.id)).collect();
        let jobs: Vec<String> = self
            .cfg
            .models
            .iter()
            .flat_map(|m| self.cfg.protocols.iter().map(move |&p| predictions_path(&m.id, p)))
            .collect();
        let scaling = self.cfg.scaling.is_some();
        stages
            .iter()
            .map(|&stage| {
                let (reads, writes) = match stage {
                    Stage::PrepareData => {
                        let mut w = data.clone();
                        w.push(DATA_DIGEST.into());
                        (Vec::new(), w)
                    }
                    Stage::Pretrain => {
                        let mut w = weights.clone();
                        w.extend(self.pretrained_models().map(|m| pretrain_log_path(&m.id)));
                        (data.clone(), w)
                    }
                    Stage::Run => {
                        let mut r = data.clone();
                        r.extend(weights.iter().cloned());
                        let w = self
                            .cfg
                            .models
                            .iter()
                            .flat_map(|m| {
                                self.cfg.protocols.iter().flat_map(move |&p| {
                                    let d = run_dir(&m.id, p);
                                    [
                                        format!("{d}/history.csv"),
                                        format!("{d}/predictions.csv"),
                                        format!("{d}/predictions.json"),
                                        format!("{d}/weights.ecgw"),
                                    ]
                                })
                            })
                            .collect();
                        (r, w)
                    }
                    Stage::Stats => {
                        let mut r = vec![format!("{DATA_DIR}/manifest.json")];
                        for j in &jobs {
                            r.push(j.clone());
                            r.push(j.replace(".csv", ".json"));
                        }
                        (r, vec![METRICS.into(), SIGNIFICANCE.into(), RANKS.into(), MEDIAN_RANKS.into()])
                    }
                    Stage::Scaling if scaling => {
                        let mut r = data.clone();
                        r.extend(weights.iter().cloned());
                        let mut w: Vec<String> = self.cfg.models.iter().map(|m| scaling_runs_path(&m.id)).collect();
                        w.extend([SCALING_FITS.into(), LABEL_EFFICIENCY.into(), SCALING_CURVE.into()]);
                        (r, w)
                    }
                    Stage::Scaling => (Vec::new(), Vec::new()),
                    Stage::Report => {
                        let mut r = vec![CONFIG_FILE.into(), DATA_DIGEST.into(), METRICS.into(), SIGNIFICANCE.into(), RANKS.into(), MEDIAN_RANKS.into()];
                        if scaling {
                            r.extend([SCALING_FITS.into(), LABEL_EFFICIENCY.into()]);
                        }
                        (r, vec![REPORT_JSON.into(), REPORT_MD.into(), RADAR.into()])
                    }
                };
                StagePlan { stage, reads, writes }
            })
            .collect()
    }

    /// Creates the output directory and records the config, refusing to mix
    /// results of different configs.
    pub fn prepare_output(&self, overwrite: bool) -> Result<()> {
        let dir = &self.cfg.output_dir;
        let cfg_path = self.out(CONFIG_FILE);
        if overwrite && dir.exists() {
            let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            if listing.count() > 0 {
                if !cfg_path.is_file() {
                    return Err(Error::Config(format!(
                        "refusing to clear {}: it does not hold benchmark output",
                        dir.display()
                    )));
                }
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut stored = self.cfg.clone();
        stored.output_dir = PathBuf::from(".");
        let bytes = serde_json::to_vec_pretty(&stored)?;
        if cfg_path.is_file() {
            let old = fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
            if old != bytes {
                return Err(Error::Config(format!(
                    "{} holds results of a different config; rerun `all` with --overwrite",
                    dir.display()
                )));
            }
        } else {
            write_bytes(&cfg_path, &bytes)?;
        }
        Ok(())
    }

    /// Fails unless the output directory is absent or empty.
    pub fn require_fresh_output(&self) -> Result<()> {
        let dir = &self.cfg.output_dir;
        if dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --overwrite to replace it",
                dir.display()
            )));
        }
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        log::info!("stage {}", stage.as_str());
        match stage {
            Stage::PrepareData => self.prepare_data(),
            Stage::Pretrain => self.pretrain(),
            Stage::Run => self.run_jobs(),
            Stage::Stats => self.stats(),
            Stage::Scaling => self.scaling(),
            Stage::Report => self.report().map(|_| ()),
        }
        .map_err(stage_err(stage))
    }

    fn load_data(&self) -> Result<Dataset> {
        load_dataset(&self.out(DATA_DIR))
    }

    fn prepare_data(&self) -> Result<()> {
        if self.out(DATA_DIGEST).is_file() {
            return Ok(());
        }
        let ds = match &self.cfg.dataset {
            DatasetSource::Path(p) => load_dataset(p)?,
            DatasetSource::Synthetic { n_records, n_leads, seed, spec, .. } => {
                generate_synthetic_dataset(*n_records, *n_leads, *seed, spec)?
            }
        };
        save_dataset(&self.out(DATA_DIR), &ds, SignalFormat::Bin)?;
        let digest = dataset_digest(&self.load_data()?)?;
        if let DatasetSource::Synthetic { sha256: Some(expected), .. } = &self.cfg.dataset {
            if *expected != digest {
                return Err(Error::Manifest(format!("dataset digest {digest} does not match expected {expected}")));
            }
        }
        write_bytes(&self.out(DATA_DIGEST), format!("{digest}\n").as_bytes())
    }

    fn pretrain(&self) -> Result<()> {
        let ds = self.load_data()?;
        let n_leads = ds.records.first().map(|r| r.n_leads()).unwrap_or(1);
        for m in &self.cfg.models {
            let path = self.out(&model_weights_path(&m.id));
            if path.is_file() {
                continue;
            }
            let backbone = m.backbone(n_leads);
            let weights = match &m.init {
                ModelInit::Random => ModelWeights::init(&backbone, None, self.cfg.seed)?,
                ModelInit::Weights(p) => {
                    let w = ModelWeights::load(p)?;
                    if w.config != backbone {
                        return Err(Error::Config(format!(
                            "model `{}`: weights in {} do not fit {n_leads}-lead data",
                            m.id,
                            p.display()
                        )));
                    }
                    w
                }
                ModelInit::Pretrain => {
                    let data = dataset_at(&ds, backbone.input_hz)?;
                    let (train, _) = data.select(Split::Train)?;
                    let (val, _) = data.select(Split::Val)?;
                    let (w, log) = pretrain_cpc(&train, &val, &backbone, &self.cfg.pretrain)?;
                    let log_path = self.out(&pretrain_log_path(&m.id));
                    ensure_parent(&log_path)?;
                    write_pretrain_log(&log_path, &log)?;
                    w
                }
            };
            write_bytes(&path, &weights.to_bytes()?)?;
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.cfg.workers)))
    }

    fn run_jobs(&self) -> Result<()> {
        let ds = self.load_data()?;
        let jobs: Vec<(&ModelSpec, ProtocolKind)> = self
            .cfg
            .models
            .iter()
            .flat_map(|m| self.cfg.protocols.iter().map(move |&p| (m, p)))
            .filter(|(m, p)| !self.out(&predictions_path(&m.id, *p)).is_file())
            .collect();
        let mut rates: Vec<u32> = Vec::new();
        let mut weights = BTreeMap::new();
        for (m, _) in &jobs {
            let w = ModelWeights::load(&self.out(&model_weights_path(&m.id)))?;
            rates.push(w.config.input_hz);
            weights.insert(m.id.clone(), w);
        }
        rates.sort_unstable();
        rates.dedup();
        let data: BTreeMap<u32, Dataset> = rates
            .into_iter()
            .map(|hz| Ok((hz, dataset_at(&ds, hz)?)))
            .collect::<Result<_>>()?;
        self.pool()?.install(|| {
            jobs.par_iter().try_for_each(|(m, p)| {
                let w = &weights[&m.id];
                let d = &data[&w.config.input_hz];
                let model = run_protocol(*p, w, d, &self.cfg.train)?;
                let dir = self.out(&run_dir(&m.id, *p));
                let history = dir.join("history.csv");
                ensure_parent(&history)?;
                write_history(&history, &model.history)?;
                write_bytes(&dir.join("weights.ecgw"), &model.weights.to_bytes()?)?;
                let preds = predict_split(&model, d, Split::Test, &m.id, self.cfg.train.batch_size)?;
                // predictions.csv is written last and marks the job complete
                write_predictions(&dir.join("predictions.csv"), &preds)
            })
        })
    }

    fn stats(&self) -> Result<()> {
        let ds_task = read_manifest(&self.out(DATA_DIR))?.task;
        let units = eval_units(&ds_task);
        let mut metrics = Vec::new();
        let mut significance = Vec::new();
        let mut ranks = Vec::new();
        for &protocol in &self.cfg.protocols {
            let sets: Vec<PredictionSet> = self
                .cfg
                .models
                .iter()
                .map(|m| read_predictions(&self.out(&predictions_path(&m.id, protocol))))
                .collect::<Result<_>>()?;
            for (subset, cols, metric) in &units {
                let sub: Vec<PredictionSet> = sets.iter().map(|s| s.evaluate_subset(cols)).collect::<Result<_>>()?;
                let intervals = sub
                    .iter()
                    .map(|s| bootstrap_metric(s, *metric, &self.cfg.bootstrap))
                    .collect::<Result<Vec<_>>>()?;
                let sig = significance_matrix(&sub, *metric, &self.cfg.bootstrap)?;
                let points: Vec<f64> = intervals.iter().map(|i| i.point).collect();
                let r = rank_models(&sig, &points, metric.higher_is_better())?;
                for ((s, iv), rank) in sub.iter().zip(&intervals).zip(r) {
                    metrics.push(MetricRow {
                        task: ds_task.name.clone(),
                        subset: subset.clone(),
                        metric: *metric,
                        protocol,
                        model_id: s.model_id.clone(),
                        point: iv.point,
                        lower: iv.lower,
                        upper: iv.upper,
                        n_valid: iv.n_valid,
                    });
                    ranks.push(RankRow {
                        task: ds_task.name.clone(),
                        subset: subset.clone(),
                        metric: *metric,
                        protocol,
                        category: ds_task.category,
                        model_id: s.model_id.clone(),
                        rank,
                    });
                }
                significance.push(SignificanceEntry {
                    task: ds_task.name.clone(),
                    subset: subset.clone(),
                    metric: *metric,
                    protocol,
                    matrix: sig,
                });
            }
        }
        write_json(&self.out(METRICS), &metrics)?;
        write_json(&self.out(SIGNIFICANCE), &significance)?;
        write_csv(&self.out(RANKS), &ranks)?;
        write_csv(&self.out(MEDIAN_RANKS), &median_rank_rows(&ranks)?)
    }

    fn scaling(&self) -> Result<()> {
        let Some(spec) = &self.cfg.scaling else {
            return Ok(());
        };
        let ds = self.load_data()?;
        let fractions = power_of_two_fractions(spec.halvings);
        let mut fits = Vec::new();
        let mut curve = Vec::new();
        for m in &self.cfg.models {
            let path = self.out(&scaling_runs_path(&m.id));
            let runs: Vec<ScalingRun> = if path.is_file() {
                read_csv(&path)?
            } else {
                let w = ModelWeights::load(&self.out(&model_weights_path(&m.id)))?;
                let d = dataset_at(&ds, w.config.input_hz)?;
                let runs = self.pool()?.install(|| {
                    run_scaling_experiment(&m.id, &w, spec.protocol, &d, &fractions, &spec.seeds, &self.cfg.train)
                })?;
                write_csv(&path, &runs)?;
                runs
            };
            let points = aggregate_runs(&runs);
            let fit = fit_scaling_law(&m.id, &points)?;
            curve.extend(points.iter().map(|p| CurveRow {
                model_id: m.id.clone(),
                n: p.n,
                loss: p.loss,
                fitted: loss_at(&fit, p.n as f64),
            }));
            fits.push(fit);
        }
        let mut eff = Vec::new();
        if let Some(ref_id) = &spec.reference_model {
            let reference = fits.iter().find(|f| &f.model_id == ref_id).expect("validated reference");
            for f in fits.iter().filter(|f| &f.model_id != ref_id) {
                for &n in &spec.efficiency_sizes {
                    eff.push(efficiency_row(f, reference, n)?);
                }
            }
        }
        write_json(&self.out(SCALING_FITS), &fits)?;
        write_csv(&self.out(LABEL_EFFICIENCY), &eff)?;
        write_csv(&self.out(SCALING_CURVE), &curve)
    }

    /// Assembles the report from persisted stage outputs.
    pub fn report(&self) -> Result<BenchmarkReport> {
        let cfg_bytes = fs::read(self.out(CONFIG_FILE)).map_err(|e| Error::io(self.out(CONFIG_FILE), e))?;
        let digest = fs::read_to_string(self.out(DATA_DIGEST)).map_err(|e| Error::io(self.out(DATA_DIGEST), e))?;
        let ledger_sha256 = match &self.cfg.ledger {
            Some(p) => Some(sha256_hex(&fs::read(p).map_err(|e| Error::io(p, e))?)),
            None => None,
        };
        let (scaling_fits, label_efficiency) = if self.cfg.scaling.is_some() {
            (read_json(&self.out(SCALING_FITS))?, read_csv(&self.out(LABEL_EFFICIENCY))?)
        } else {
            (Vec::new(), Vec::new())
        };
        let report = BenchmarkReport {
            environment: Environment {
                seed: self.cfg.seed,
                crate_version: env!("CARGO_PKG_VERSION").into(),
                config_sha256: sha256_hex(&cfg_bytes),
                dataset_sha256: digest.trim().into(),
                ledger_sha256,
            },
            metrics: read_json(&self.out(METRICS))?,
            significance: read_json(&self.out(SIGNIFICANCE))?,
            ranks: read_csv(&self.out(RANKS))?,
            median_ranks: read_csv(&self.out(MEDIAN_RANKS))?,
            scaling_fits,
            label_efficiency,
        };
        write_json(&self.out(REPORT_JSON), &report)?;
        write_bytes(&self.out(REPORT_MD), render_markdown(&report).as_bytes())?;
        let (header, rows) = radar_rows(&report.median_ranks);
        let mut w = csv::Writer::from_path(self.out(RADAR))?;
        w.write_record(&header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::io(self.out(RADAR), e))?;
        Ok(report)
    }
}

fn efficiency_row(model: &ScalingFit, reference: &ScalingFit, n: f64) -> Result<EfficiencyRow> {
    let row = |n_star, r, status: &str| EfficiencyRow {
        model_id: model.model_id.clone(),
        reference_id: reference.model_id.clone(),
        n,
        n_star,
        r,
        status: status.into(),
    };
    match label_efficiency(model, reference, n) {
        Ok(e) => Ok(row(Some(e.n_star), Some(e.r), "ok")),
        Err(Error::Saturated { .. }) => Ok(row(None, None, "saturated")),
        Err(Error::FlatCurve) => Ok(row(None, None, "flat_curve")),
        Err(e) => Err(e),
    }
}

/// Median rank of every model and protocol over the tasks of each category.
fn median_rank_rows(ranks: &[RankRow]) -> Result<Vec<MedianRankRow>> {
    let mut out = Vec::new();
    let mut groups: BTreeMap<(&str, &str), Vec<&RankRow>> = BTreeMap::new();
    for r in ranks {
        groups.entry((r.protocol.as_str(), r.category.as_str())).or_default().push(r);
    }
    for rows in groups.values() {
        let mut models: Vec<&str> = rows.iter().map(|r| r.model_id.as_str()).collect();
        models.sort_unstable();
        models.dedup();
        let mut tasks: BTreeMap<(&str, &str, Metric), Vec<f64>> = BTreeMap::new();
        for r in rows {
            let row = tasks
                .entry((r.task.as_str(), r.subset.as_str(), r.metric))
                .or_insert_with(|| vec![f64::NAN; models.len()]);
            row[models.binary_search(&r.model_id.as_str()).expect("listed")] = r.rank as f64;
        }
        let n_tasks = tasks.len();
        let by_cat = BTreeMap::from([(0u8, tasks.into_values().collect::<Vec<_>>())]);
        let medians = median_ranks(&by_cat)?.remove(&0).unwrap_or_default();
        for (m, med) in models.iter().zip(medians) {
            out.push(MedianRankRow {
                model_id: m.to_string(),
                protocol: rows[0].protocol,
                category: rows[0].category,
                median_rank: med,
                n_tasks,
            });
        }
    }
    Ok(out)
}

/// Runs `stages` in order after validating the config.
pub fn run_stages(pipeline: &Pipeline, stages: &[Stage], overwrite: bool) -> Result<()> {
    pipeline.prepare_output(overwrite)?;
    for &s in stages {
        pipeline.run_stage(s)?;
    }
    Ok(())
}

/// Every stage into a fresh output directory.
pub fn run_benchmark(cfg: BenchmarkConfig, overwrite: bool) -> Result<BenchmarkReport> {
    let p = Pipeline::new(cfg)?;
    if !overwrite {
        p.require_fresh_output()?;
    }
    run_stages(&p, &Stage::ALL, overwrite)?;
    read_json(&p.out(REPORT_JSON))
}
