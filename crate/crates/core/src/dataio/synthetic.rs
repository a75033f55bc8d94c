//! Synthetic ECG-like datasets with labels tied to injected morphology.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::format::Dataset;
use super::manifest::{Sex, SplitManifest, Stratum};
use super::record::EcgRecord;
use super::task::{Category, LabelKind, LabelMatrix, TaskKind, TaskSpec};
use crate::error::{Error, Result};

pub const BINARY_LABELS: [&str; 5] = [
    "tachycardia",
    "wide_qrs",
    "st_elevation",
    "t_inversion",
    "irregular_rhythm",
];
pub const REGRESSION_LABELS: [&str; 2] = ["heart_rate", "qrs_duration_ms"];

/// Heart rate separating the tachycardia class, in beats per minute.
pub const TACHY_THRESHOLD_BPM: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sampling_rate: u32,
    pub duration_s: f64,
    /// Standard deviation of additive white noise, mV.
    pub noise_mv: f64,
    /// Probability of each binary finding.
    pub prevalence: f64,
    /// Probability that a regression target is missing.
    pub missing_fraction: f64,
    pub records_per_subject: usize,
    /// Train and validation shares of subjects; test takes the rest.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sampling_rate: 240,
            duration_s: 5.0,
            noise_mv: 0.03,
            prevalence: 0.3,
            missing_fraction: 0.05,
            records_per_subject: 2,
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.sampling_rate == 0 {
            return bad("sampling_rate must be positive");
        }
        if !(self.duration_s * f64::from(self.sampling_rate) >= 1.0) {
            return bad("records would have no samples");
        }
        if !(self.noise_mv >= 0.0) {
            return bad("noise_mv must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.prevalence) || !(0.0..=1.0).contains(&self.missing_fraction) {
            return bad("prevalence and missing_fraction must lie in [0, 1]");
        }
        if self.records_per_subject == 0 {
            return bad("records_per_subject must be at least 1");
        }
        if self.train_fraction <= 0.0 || self.val_fraction < 0.0 || self.train_fraction + self.val_fraction > 1.0 {
            return bad("split fractions must be positive and sum to at most 1");
        }
        Ok(())
    }
}

pub fn synthetic_task() -> TaskSpec {
    let mut eval_subsets = BTreeMap::new();
    eval_subsets.insert("rhythm".to_string(), vec![0, 4]);
    eval_subsets.insert("morphology".to_string(), vec![1, 2, 3]);
    TaskSpec {
        name: "synthetic".into(),
        kind: TaskKind::Joint,
        category: Category::AdultEcgInterpretation,
        label_names: BINARY_LABELS.iter().chain(&REGRESSION_LABELS).map(|s| s.to_string()).collect(),
        label_kinds: [LabelKind::Binary; 5]
            .into_iter()
            .chain([LabelKind::Continuous; 2])
            .collect(),
        eval_subsets,
    }
}

struct BeatShape {
    rr_s: f64,
    qrs_s: f64,
    st_mv: f64,
    t_mv: f64,
    /// Uniform jitter of each beat around its regular slot, as a fraction of RR.
    jitter: f64,
}

/// Adds `amp * exp(-(t - centre)^2 / (2 width^2))` to `out`.
fn add_wave(out: &mut [f64], rate: f64, centre_s: f64, width_s: f64, amp: f64) {
    let lo = ((centre_s - 4.0 * width_s) * rate).floor().max(0.0) as usize;
    let hi = (((centre_s + 4.0 * width_s) * rate).ceil().max(0.0) as usize).min(out.len());
    for (i, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let d = (i as f64 / rate - centre_s) / width_s;
        *v += amp * (-0.5 * d * d).exp();
    }
}

fn beat_times<R: Rng>(shape: &BeatShape, duration: f64, rng: &mut R) -> Vec<f64> {
    let start = -rng.random_range(0.0..shape.rr_s);
    let mut times = Vec::new();
    let mut k = 0;
    loop {
        let slot = start + k as f64 * shape.rr_s;
        if slot > duration + shape.rr_s {
            break;
        }
        times.push(slot + rng.random_range(-shape.jitter..=shape.jitter) * shape.rr_s);
        k += 1;
    }
    times
}

fn render(shape: &BeatShape, beats: &[f64], gain: f64, rate: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let q = shape.qrs_s;
    let t_offset = 0.16 + 0.15 * shape.rr_s;
    for &b in beats {
        add_wave(&mut out, rate, b - 0.15, 0.025, 0.15 * gain);
        add_wave(&mut out, rate, b - 0.35 * q, q / 10.0, -0.12 * gain);
        add_wave(&mut out, rate, b, q / 6.0, 1.0 * gain);
        add_wave(&mut out, rate, b + 0.35 * q, q / 10.0, -0.25 * gain);
        if shape.st_mv != 0.0 {
            add_wave(&mut out, rate, b + 0.5 * q + 0.05, 0.04, shape.st_mv * gain);
        }
        add_wave(&mut out, rate, b + t_offset, 0.045, shape.t_mv * gain);
    }
    out
}

/// Deterministic dataset of `n_records` records split by subject.
pub fn generate_synthetic_dataset(n_records: usize, n_leads: usize, seed: u64, spec: &SyntheticSpec) -> Result<Dataset> {
    if n_records == 0 || n_leads == 0 {
        return Err(Error::InvalidParameter("n_records and n_leads must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = f64::from(spec.sampling_rate);
    let n = (spec.duration_s * rate).round() as usize;
    let noise = Normal::new(0.0, spec.noise_mv.max(1e-300)).expect("valid std");
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let task = synthetic_task();

    let n_subjects = n_records.div_ceil(spec.records_per_subject);
    let subjects: Vec<(f64, Sex, f64)> = (0..n_subjects)
        .map(|_| {
            let age = rng.random_range(18.0..90.0);
            let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
            let scale = rng.random_range(0.8..1.2);
            (age, sex, scale)
        })
        .collect();

    let mut records = Vec::with_capacity(n_records);
    let mut values = Vec::with_capacity(n_records * 7);
    let mut mask = Vec::with_capacity(n_records * 7);
    let mut strata = BTreeMap::new();
    let mut subject_of = BTreeMap::new();
    for r in 0..n_records {
        let s = r / spec.records_per_subject;
        let (age, sex, scale) = subjects[s];
        let flags: Vec<bool> = (0..5).map(|_| rng.random_bool(spec.prevalence)).collect();
        let hr = if flags[0] { rng.random_range(110.0..150.0) } else { rng.random_range(50.0..90.0) };
        let qrs_ms = if flags[1] { rng.random_range(130.0..170.0) } else { rng.random_range(75.0..100.0) };
        let shape = BeatShape {
            rr_s: 60.0 / hr,
            qrs_s: qrs_ms / 1000.0,
            st_mv: if flags[2] { rng.random_range(0.15..0.3) } else { 0.0 },
            t_mv: if flags[3] { -rng.random_range(0.2..0.4) } else { rng.random_range(0.2..0.4) },
            jitter: if flags[4] { 0.25 } else { 0.02 },
        };
        let beats = beat_times(&shape, spec.duration_s, &mut rng);
        let wander_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut signal = Vec::with_capacity(n * n_leads);
        for l in 0..n_leads {
            let gain = scale * (1.0 - 0.5 * l as f64 / n_leads as f64);
            let mut lead = render(&shape, &beats, gain, rate, n);
            for (i, v) in lead.iter_mut().enumerate() {
                let t = i as f64 / rate;
                *v += 0.05 * (std::f64::consts::TAU * 0.3 * t + wander_phase + l as f64).sin();
                if spec.noise_mv > 0.0 {
                    *v += noise.sample(&mut rng);
                }
            }
            signal.extend(lead);
        }
        let record_id = format!("rec{r:05}");
        let subject_id = format!("subj{s:05}");
        records.push(EcgRecord::new(record_id.clone(), subject_id.clone(), spec.sampling_rate, n_leads, signal)?);

        values.extend(flags.iter().map(|&f| f64::from(u8::from(f))));
        mask.extend([true; 5]);
        let targets = [hr + 2.0 * unit.sample(&mut rng), qrs_ms + 5.0 * unit.sample(&mut rng)];
        for t in targets {
            values.push(t);
            mask.push(!rng.random_bool(spec.missing_fraction));
        }
        strata.insert(
            record_id.clone(),
            Stratum {
                labels: flags
                    .iter()
                    .zip(BINARY_LABELS)
                    .filter(|(f, _)| **f)
                    .map(|(_, name)| name.to_string())
                    .collect(),
                age_bin: Some(Stratum::age_bin_of(age)),
                sex: Some(sex),
            },
        );
        subject_of.insert(record_id, subject_id);
    }
    let labels = LabelMatrix::new(task.label_kinds.clone(), values, mask)?;

    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut rng);
    let n_train = ((spec.train_fraction * n_subjects as f64).round() as usize).clamp(1, n_subjects);
    let n_val = ((spec.val_fraction * n_subjects as f64).round() as usize).min(n_subjects - n_train);
    let mut which = vec![0u8; n_subjects];
    for (pos, &s) in order.iter().enumerate() {
        which[s] = if pos < n_train { 0 } else if pos < n_train + n_val { 1 } else { 2 };
    }
    let mut split = SplitManifest {
        strata,
        subjects: subject_of,
        ..Default::default()
    };
    for rec in &records {
        let s = rec.subject_id()[4..].parse::<usize>().expect("generated subject id");
        let id = rec.record_id().to_string();
        match which[s] {
            0 => split.train.push(id),
            1 => split.val.push(id),
            _ => split.test.push(id),
        }
    }
    Ok(Dataset {
        records,
        labels,
        task,
        split,
    })
}
