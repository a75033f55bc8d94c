//! One test per acceptance criterion. Each prints a `PASS` or `FAIL` line to
//! stdout, uncaptured, with its measured runtime.

mod support;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ecgbench::adapt::{build_param_groups, predict_record, prepare_model, run_protocol, ProtocolKind, TrainConfig};
use ecgbench::backbones::{infer, BackboneConfig, BackboneKind, ModelWeights, NormMode, Scale};
use ecgbench::dataio::{generate_synthetic_dataset, stack_records, EcgRecord, LabelKind, SyntheticSpec};
use ecgbench::optim::{adamw_step, AdamState, AdamWConfig};
use ecgbench::pipeline::{predictions_path, run_benchmark, BenchmarkConfig, DatasetSource};
use ecgbench::scaling::{fit_scaling_law, label_efficiency, loss_at, ScalingFit, ScalingPoint};
use ecgbench::stats::*;
use ecgbench::tensor::gradient_check;
use ecgbench::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use support::models::{backbone_gradcheck, random_ssm};
use support::opcases::{make_case, OP_NAMES};
use support::tables::{MODELS, PATIENT_MEDIANS, PATIENT_RANKS, PTB_FINETUNED};

static LOCK: Mutex<()> = Mutex::new(());

/// Runs `f` alone, prints its verdict line and fails unless it passed within `limit`.
fn criterion(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Result<String, String>) {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if secs <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {:.1}s, limit {:.0}s", secs.as_secs_f64(), limit.as_secs_f64())),
        Err(d) => (false, d),
    };
    let line = format!(
        "criterion {id:2} {} {name}: {detail} ({:.2}s)\n",
        if ok { "PASS" } else { "FAIL" },
        secs.as_secs_f64()
    );
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "{}", line.trim_end());
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

const S4: (f64, f64, f64) = (0.677, 0.206, 0.089);

/// Reference fits: ECGFounder, ECG-JEPA and ECG-CPC pretrained, the two
/// from-scratch runs, then the supervised S4 baseline.
const FITS: [(&str, (f64, f64, f64)); 6] = [
    ("ECGFounder", (0.462, 0.109, 0.018)),
    ("ECG-JEPA", (0.402, 0.083, 1.32e-13)),
    ("ECG-CPC", (0.463, 0.104, 4.35e-7)),
    ("ECGFounder scratch", (0.887, 0.270, 0.120)),
    ("ECG-CPC scratch", (0.501, 0.101, 9.13e-10)),
    ("S4", S4),
];

/// Reference label-efficiency ratios at N = 250, 500, 1000, 2000.
const RATIOS: [(&str, [f64; 4]); 3] = [
    ("ECGFounder", [0.30, 0.40, 0.51, 0.62]),
    ("ECG-JEPA", [0.11, 0.17, 0.27, 0.40]),
    ("ECG-CPC", [0.21, 0.27, 0.34, 0.40]),
];

#[test]
fn criterion_01_label_efficiency_table() {
    criterion(1, "label-efficiency ratios", Duration::from_secs(1), || {
        let s4 = ScalingFit::new("S4", S4.0, S4.1, S4.2);
        let mut worst: f64 = 0.0;
        for (i, (name, expected)) in RATIOS.iter().enumerate() {
            let p = FITS[i].1;
            let fit = ScalingFit::new(name, p.0, p.1, p.2);
            for (n, want) in [250.0, 500.0, 1000.0, 2000.0].into_iter().zip(expected) {
                let r = label_efficiency(&fit, &s4, n).map_err(|e| format!("{name} N={n}: {e}"))?.r;
                // oracle: solve C N*^-a + L0 = reference loss directly
                let target = S4.0 * f64::powf(n, -S4.1) + S4.2;
                let oracle = ((target - p.2) / p.0).ln() / -p.1;
                check(((r * n).ln() - oracle).abs() < 1e-9, || format!("{name} N={n}: r={r} disagrees with oracle"))?;
                worst = worst.max((r - want).abs());
                check((r - want).abs() <= 0.01, || format!("{name} N={n}: r={r:.4}, expected {want}"))?;
            }
        }
        Ok(format!("12 cells, max deviation {worst:.4}"))
    });
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

#[test]
fn criterion_02_auroc_oracle() {
    criterion(2, "macro-AUROC vs brute force", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut worst, mut tied, mut undefined) = (0.0f64, 0, 0);
        for inst in 0..1000 {
            let n = rng.random_range(2..=50);
            let k = rng.random_range(1..=5);
            let ties = inst % 2 == 0;
            let scores: Vec<f64> = (0..n * k)
                .map(|_| if ties { f64::from(rng.random_range(0..4u8)) } else { rng.random::<f64>() })
                .collect();
            let labels: Vec<bool> = (0..n * k).map(|_| rng.random_bool(0.4)).collect();
            let set = PredictionSet {
                model_id: "m".into(),
                task_id: "t".into(),
                record_ids: (0..n).map(|i| format!("r{i}")).collect(),
                label_names: (0..k).map(|l| format!("l{l}")).collect(),
                kinds: vec![LabelKind::Binary; k],
                scores: scores.clone(),
                targets: labels.iter().map(|&b| f64::from(u8::from(b))).collect(),
                mask: vec![true; n * k],
            };
            let per_label: Vec<f64> = (0..k)
                .filter_map(|l| {
                    let s: Vec<f64> = (0..n).map(|i| scores[i * k + l]).collect();
                    let y: Vec<bool> = (0..n).map(|i| labels[i * k + l]).collect();
                    brute_auroc(&s, &y)
                })
                .collect();
            tied += usize::from(ties);
            match (macro_auroc(&set, None), per_label.is_empty()) {
                (Ok(v), false) => {
                    let want = per_label.iter().sum::<f64>() / per_label.len() as f64;
                    worst = worst.max((v - want).abs());
                    check((v - want).abs() <= 1e-12, || format!("instance {inst}: {v} vs {want}"))?;
                }
                (Err(_), true) => undefined += 1,
                (got, _) => return Err(format!("instance {inst}: {got:?} but {} defined labels", per_label.len())),
            }
        }
        Ok(format!("1000 instances ({tied} with ties, {undefined} undefined), max error {worst:.1e}"))
    });
}

#[test]
fn criterion_03_gradient_checks() {
    criterion(3, "finite-difference gradients", Duration::from_secs(60), || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for name in OP_NAMES {
            for _ in 0..3 {
                let case = make_case(name, &mut rng);
                let err = gradient_check(&case.f, &case.inputs, case.h).map_err(|e| format!("{name}: {e}"))?;
                worst = worst.max(err);
                check(err < 1e-4, || format!("{name}: relative error {err:.2e}"))?;
            }
        }
        for (kind, mode) in [
            (BackboneKind::S4Supervised, NormMode::Train),
            (BackboneKind::EcgCpc, NormMode::Train),
            (BackboneKind::CnnBaseline, NormMode::Train),
            (BackboneKind::CnnBaseline, NormMode::Frozen),
        ] {
            let err = backbone_gradcheck(kind, mode, 3).map_err(|e| format!("{kind:?}: {e}"))?;
            worst = worst.max(err);
            check(err < 1e-4, || format!("{kind:?} {mode:?}: relative error {err:.2e}"))?;
        }
        Ok(format!("{} ops, SSM layer and CNN block, max relative error {worst:.2e}", OP_NAMES.len()))
    });
}

#[test]
fn criterion_04_ssm_fft_matches_recurrence() {
    criterion(4, "SSM convolution vs recurrence", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for draw in 0..100 {
            let t = rng.random_range(1..=512);
            let channels = rng.random_range(1..=4);
            let modes = rng.random_range(1..=8);
            let p = random_ssm(&mut rng, channels, modes);
            let u: Vec<f64> = (0..channels * t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fft = p.convolve_fft(&u, t).map_err(|e| e.to_string())?;
            let rec = p.recurrence(&u, t).map_err(|e| e.to_string())?;
            let scale = rec.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            let err = fft.iter().zip(&rec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(err);
            check(err < 1e-6, || format!("draw {draw} (L={t}): relative error {err:.2e}"))?;
        }
        Ok(format!("100 draws, max relative error {worst:.2e}"))
    });
}

fn curve(sizes: &[usize], p: (f64, f64, f64), noise: Option<(f64, u64)>) -> Vec<ScalingPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.map_or(0, |n| n.1));
    let normal = Normal::new(0.0, noise.map_or(1.0, |n| n.0)).unwrap();
    let truth = ScalingFit::new("truth", p.0, p.1, p.2);
    sizes
        .iter()
        .map(|&n| ScalingPoint { n, loss: loss_at(&truth, n as f64) + noise.map_or(0.0, |_| normal.sample(&mut rng)) })
        .collect()
}

#[test]
fn criterion_05_scaling_fit_recovery() {
    criterion(5, "scaling-law recovery", Duration::from_secs(60), || {
        let fractions: Vec<usize> = (0..8).map(|k| 250 << k).collect();
        let mut worst_param: f64 = 0.0;
        for (name, p) in FITS {
            let fit = fit_scaling_law(name, &curve(&fractions, p, None)).map_err(|e| format!("{name}: {e}"))?;
            let err = (fit.c - p.0).abs().max((fit.alpha - p.1).abs()).max((fit.l0 - p.2).abs());
            worst_param = worst_param.max(err);
            check(err <= 1e-4, || format!("{name}: noiseless fit {fit:?}"))?;
        }
        let doublings: Vec<usize> = (0..15).map(|k| 100 << k).collect();
        let mut worst_alpha: f64 = 0.0;
        for (name, p) in FITS {
            for seed in 0..100 {
                let fit = fit_scaling_law(name, &curve(&doublings, p, Some((0.002, seed))))
                    .map_err(|e| format!("{name} seed {seed}: {e}"))?;
                worst_alpha = worst_alpha.max((fit.alpha - p.1).abs());
                check((fit.alpha - p.1).abs() <= 0.03, || format!("{name} seed {seed}: alpha {}", fit.alpha))?;
            }
        }
        Ok(format!("noiseless max error {worst_param:.1e}; noisy alpha max error {worst_alpha:.4} over 6 x 100 fits"))
    });
}

fn ptb_matrix() -> SignificanceMatrix {
    let ids: Vec<String> = MODELS.iter().map(|s| s.to_string()).collect();
    let mut b = vec![vec![false; 10]; 10];
    for t in [0, 1, 2, 3, 5, 6, 7] {
        for loser in [4, 8, 9] {
            b[t][loser] = true;
        }
    }
    b[4][9] = true;
    b[8][9] = true;
    SignificanceMatrix::from_better(ids, b).unwrap()
}

#[test]
fn criterion_06_ranking_fixture() {
    criterion(6, "rank groups and median ranks", Duration::from_secs(1), || {
        let points = [0.656, 0.679, 0.694, 0.717, 0.612, 0.699, 0.725, 0.702, 0.654, 0.564];
        let ranks = rank_models(&ptb_matrix(), &points, true).map_err(|e| e.to_string())?;
        check(ranks == PTB_FINETUNED, || format!("PTB ranks {ranks:?}"))?;
        let mut mismatches = Vec::new();
        for (mode, mode_name) in ["finetuned", "frozen", "linear"].into_iter().enumerate() {
            let rows: Vec<Vec<f64>> = PATIENT_RANKS
                .iter()
                .map(|(_, r)| r.iter().map(|m| f64::from(m[mode])).collect())
                .collect();
            let med = median_ranks(&BTreeMap::from([("patient", rows)])).map_err(|e| e.to_string())?["patient"].clone();
            for (m, &v) in med.iter().enumerate() {
                if v != PATIENT_MEDIANS[m][mode] {
                    mismatches.push(format!("{} {mode_name}: {v} vs expected {}", MODELS[m], PATIENT_MEDIANS[m][mode]));
                }
            }
        }
        check(mismatches.is_empty(), || {
            format!("PTB pattern ok; {}/30 medians match; {}", 30 - mismatches.len(), mismatches.join(", "))
        })?;
        Ok("PTB pattern and all 30 medians match".into())
    });
}

fn known_auroc_set(rng: &mut ChaCha8Rng, n: usize) -> PredictionSet {
    // unit-variance classes separated by sqrt(2) * probit(0.8)
    let d = 2f64.sqrt() * 0.841_621_233_572_914_3;
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    PredictionSet {
        model_id: "m".into(),
        task_id: "t".into(),
        record_ids: (0..n).map(|i| format!("r{i}")).collect(),
        label_names: vec!["y".into()],
        kinds: vec![LabelKind::Binary],
        scores: labels.iter().map(|&l| rng.sample::<f64, _>(StandardNormal) + if l { d } else { 0.0 }).collect(),
        targets: labels.iter().map(|&b| f64::from(u8::from(b))).collect(),
        mask: vec![true; n],
    }
}

#[test]
fn criterion_07_bootstrap_calibration() {
    criterion(7, "bootstrap coverage", Duration::from_secs(300), || {
        let mut covered = 0;
        for trial in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + trial);
            let set = known_auroc_set(&mut rng, 500);
            let cfg = BootstrapConfig { seed: trial, ..Default::default() };
            let ci = bootstrap_metric(&set, Metric::MacroAuroc, &cfg).map_err(|e| e.to_string())?;
            covered += usize::from(ci.lower <= 0.8 && 0.8 <= ci.upper);
            if trial < 5 {
                let again = bootstrap_metric(&set, Metric::MacroAuroc, &cfg).map_err(|e| e.to_string())?;
                check(
                    again.lower.to_bits() == ci.lower.to_bits() && again.upper.to_bits() == ci.upper.to_bits(),
                    || format!("trial {trial}: repeated CI differs"),
                )?;
            }
        }
        check(covered >= 180, || format!("coverage {covered}/200"))?;
        Ok(format!("coverage {covered}/200, repeated seeds bit-identical"))
    });
}

#[test]
fn criterion_08_z_mae_baseline() {
    criterion(8, "z-MAE of the train-mean predictor", Duration::from_secs(60), || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mean = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).sum::<f64>() / n as f64;
        let set = PredictionSet {
            model_id: "mean".into(),
            task_id: "t".into(),
            record_ids: (0..n).map(|i| i.to_string()).collect(),
            label_names: vec!["y".into()],
            kinds: vec![LabelKind::Continuous],
            scores: vec![mean; n],
            targets: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            mask: vec![true; n],
        };
        let z = mean_z_mae(&set, None).map_err(|e| e.to_string())?;
        let want = (2.0 / std::f64::consts::PI).sqrt();
        check((z - want).abs() <= 0.02, || format!("z-MAE {z:.4}, expected {want:.4}"))?;
        Ok(format!("z-MAE {z:.4} vs {want:.4}"))
    });
}

fn config_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cpc-vs-random.json")
}

#[test]
fn criterion_09_end_to_end_pipeline() {
    criterion(9, "CPC probe vs random-init probe", Duration::from_secs(600), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = BenchmarkConfig::load(&config_path()).map_err(|e| e.to_string())?;
        check(
            matches!(&cfg.dataset, DatasetSource::Synthetic { n_records: 2000, sha256: Some(_), .. }),
            || "config does not pin the 2000-record dataset".into(),
        )?;
        cfg.output_dir = dir.path().to_path_buf();
        run_benchmark(cfg.clone(), false).map_err(|e| e.to_string())?;
        let protocol = ProtocolKind::LinearProbe;
        let read = |id: &str| read_predictions(&dir.path().join(predictions_path(id, protocol)));
        let (cpc, random) = (read("cpc").map_err(|e| e.to_string())?, read("random").map_err(|e| e.to_string())?);
        let binary: Vec<usize> = (0..cpc.n_labels()).filter(|&l| cpc.kinds[l] == LabelKind::Binary).collect();
        let cpc = cpc.evaluate_subset(&binary).map_err(|e| e.to_string())?;
        let random = random.evaluate_subset(&binary).map_err(|e| e.to_string())?;
        let (a, b) = (macro_auroc(&cpc, None).map_err(|e| e.to_string())?, macro_auroc(&random, None).map_err(|e| e.to_string())?);
        check(cfg.bootstrap.n_iterations == 1000 && cfg.bootstrap.confidence == 0.95, || "bootstrap settings".into())?;
        let paired = paired_significance(&cpc, &random, Metric::MacroAuroc, &cfg.bootstrap).map_err(|e| e.to_string())?;
        let d = paired.difference;
        let summary = format!(
            "macro-AUROC {a:.4} vs {b:.4}, difference {:.4} [{:.4}, {:.4}], significant {}",
            d.point, d.lower, d.upper, paired.significant
        );
        check(d.point >= 0.05 && paired.significant, || summary.clone())?;
        Ok(summary)
    });
}

fn small_s4(dim: usize) -> BackboneConfig {
    let mut c = BackboneConfig::preset(BackboneKind::S4Supervised, 1, Scale::Desk);
    c.model_dim = dim;
    c.n_ssm_layers = 2;
    c
}

#[test]
fn criterion_10_protocol_contracts() {
    criterion(10, "protocol contracts", Duration::from_secs(120), || {
        let spec = SyntheticSpec { sampling_rate: 100, ..Default::default() };
        let ds = generate_synthetic_dataset(60, 1, 10, &spec).map_err(|e| e.to_string())?;
        let w = ModelWeights::init(&small_s4(8), None, 10).map_err(|e| e.to_string())?;
        let train = TrainConfig { max_epochs: 2, batch_size: 16, head_lr: 1e-2, ..Default::default() };
        for kind in [ProtocolKind::LinearProbe, ProtocolKind::FrozenQueryHead] {
            let m = run_protocol(kind, &w, &ds, &train).map_err(|e| e.to_string())?;
            let after: Vec<_> = m.weights.backbone_tensors().collect();
            let before: Vec<_> = w.backbone_tensors().collect();
            check(after == before, || format!("{} changed the backbone", kind.as_str()))?;
        }

        let mut ft = prepare_model(ProtocolKind::FinetuneLinearHead, &w, 2, 1).map_err(|e| e.to_string())?;
        let before = ft.clone();
        let groups = build_param_groups(&ft, &TrainConfig::default());
        let [lo, up, hd] = groups.lrs;
        check((up / lo - 10.0).abs() < 1e-9 && (hd / lo - 100.0).abs() < 1e-9, || format!("rates {:?}", groups.lrs))?;
        let grads: BTreeMap<String, Tensor> = groups
            .lr_map()
            .keys()
            .map(|p| (p.clone(), Tensor::full(ft.get(p).unwrap().shape(), 1.0)))
            .collect();
        let opt = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut ft, &grads, &groups.lr_map(), &mut AdamState::new(), &opt).map_err(|e| e.to_string())?;
        let step = |paths: &[String]| {
            let d: Vec<f64> = paths
                .iter()
                .flat_map(|p| {
                    let (a, b) = (ft.get(p).unwrap().data().to_vec(), before.get(p).unwrap().data().to_vec());
                    a.into_iter().zip(b).map(|(x, y)| (x - y).abs())
                })
                .collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let (dl, du, dh) = (step(&groups.lower), step(&groups.upper), step(&groups.head));
        check((du / dl - 10.0).abs() < 1e-6 && (dh / dl - 100.0).abs() < 1e-6, || {
            format!("realized steps {dl:.3e} {du:.3e} {dh:.3e}")
        })?;

        let headed = prepare_model(ProtocolKind::LinearProbe, &w, 3, 10).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let win: Vec<f64> = (0..250).map(|_| rng.random_range(-1.0..1.0)).collect();
        let one = EcgRecord::new("w", "s", 100, 1, win.clone()).map_err(|e| e.to_string())?;
        let single = infer(&headed, &stack_records(&[one]).map_err(|e| e.to_string())?, 100)
            .map_err(|e| e.to_string())?
            .outputs
            .ok_or("no head outputs")?;
        let tiled = EcgRecord::new("t", "s", 100, 1, win.repeat(5)).map_err(|e| e.to_string())?;
        let avg = predict_record(&headed, &tiled).map_err(|e| e.to_string())?;
        let err = avg.iter().zip(single.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check(err <= 1e-12, || format!("tiled record differs by {err:.2e}"))?;
        Ok(format!("backbones bit-identical, steps 1:{:.1}:{:.1}, tiled error {err:.1e}", du / dl, dh / dl))
    });
}
