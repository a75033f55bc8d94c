use std::fs;
use std::path::Path;

use ecgbench::dataio::{
    apply_znorm, fit_znorm, generate_synthetic_dataset, inverse_znorm, load_dataset, random_crop, save_dataset,
    sliding_windows, stratified_subsample, synthetic::TACHY_THRESHOLD_BPM, EcgRecord, LabelKind, LabelMatrix,
    SignalFormat, SplitManifest, Stratum, SyntheticSpec,
};
use ecgbench::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const MANIFEST: &str = r#"{
  "format_version": 1,
  "task": {
    "name": "fixture",
    "kind": "joint",
    "category": "adult_ecg_interpretation",
    "label_names": ["af", "hr"],
    "label_kinds": ["binary", "continuous"],
    "eval_subsets": {"rhythm": [0]}
  },
  "records": [
    {"record_id": "a", "sampling_rate": 100},
    {"record_id": "b", "sampling_rate": 100},
    {"record_id": "c", "sampling_rate": 100}
  ],
  "split": {"train": ["a"], "val": ["b"], "test": ["c"],
            "subjects": {"a": "s1", "b": "s2", "c": "s3"}}
}"#;

fn write_fixture(dir: &Path, manifest: &str, labels: &str, nan_in: Option<&str>) {
    fs::create_dir_all(dir.join("records")).unwrap();
    fs::write(dir.join("manifest.json"), manifest).unwrap();
    fs::write(dir.join("labels.csv"), labels).unwrap();
    for id in ["a", "b", "c"] {
        let mut body = String::from("I,II\n");
        for t in 0..5 {
            if nan_in == Some(id) && t == 3 {
                body.push_str("0.1,NaN\n");
            } else {
                body.push_str(&format!("{},{}\n", t as f64 * 0.1, -(t as f64)));
            }
        }
        fs::write(dir.join("records").join(format!("{id}.csv")), body).unwrap();
    }
}

const LABELS: &str = "record_id,af,hr\na,1,60.5\nb,0,\nc,1,80\n";

#[test]
fn loads_three_record_fixture() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), MANIFEST, LABELS, None);
    let d = load_dataset(dir.path()).unwrap();
    assert_eq!(d.records.len(), 3);
    assert_eq!((d.labels.n_rows(), d.labels.n_labels()), (3, 2));
    assert_eq!(d.records[1].record_id(), "b");
    assert_eq!(d.records[2].subject_id(), "s3");
    assert_eq!(d.records[0].n_leads(), 2);
    assert_eq!(d.records[0].lead(1), &[0.0, -1.0, -2.0, -3.0, -4.0]);
    assert_eq!(d.labels.get(1, 1), None);
    assert_eq!(d.labels.get(2, 1), Some(80.0));
}

#[test]
fn nan_sample_names_record() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), MANIFEST, LABELS, Some("b"));
    match load_dataset(dir.path()) {
        Err(Error::Load { record_id, .. }) => assert_eq!(record_id, "b"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn record_in_two_splits_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = MANIFEST.replace(r#""val": ["b"]"#, r#""val": ["b", "a"]"#);
    write_fixture(dir.path(), &bad, LABELS, None);
    assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest(_))));
}

#[test]
fn unknown_label_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), MANIFEST, "record_id,af,hr,zz\na,1,1,1\n", None);
    assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest(m)) if m.contains("zz")));

    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), MANIFEST, LABELS, None);
    fs::remove_file(dir.path().join("records/c.csv")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Load { record_id, .. }) if record_id == "c"));
}

#[test]
fn binary_format_round_trips_bit_exactly() {
    let spec = SyntheticSpec {
        duration_s: 1.0,
        ..Default::default()
    };
    let d = generate_synthetic_dataset(12, 3, 5, &spec).unwrap();
    let first = tempfile::tempdir().unwrap();
    save_dataset(first.path(), &d, SignalFormat::Bin).unwrap();
    let loaded = load_dataset(first.path()).unwrap();
    let second = tempfile::tempdir().unwrap();
    save_dataset(second.path(), &loaded, SignalFormat::Bin).unwrap();
    let again = load_dataset(second.path()).unwrap();
    assert_eq!(loaded, again);
    for (a, b) in loaded.records.iter().zip(&again.records) {
        let bits = |r: &EcgRecord| r.signal().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(loaded.labels, d.labels);
}

#[test]
fn csv_format_round_trips() {
    let d = generate_synthetic_dataset(
        4,
        2,
        9,
        &SyntheticSpec {
            duration_s: 0.5,
            ..Default::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &d, SignalFormat::Csv).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), d);
}

/// Mean R-R interval from a brute-force peak detector on lead 0.
fn mean_peak_interval(r: &EcgRecord) -> f64 {
    let x = r.lead(0);
    let rate = f64::from(r.sampling_rate());
    let top = x.iter().fold(f64::MIN, |m, &v| m.max(v));
    let mut cand: Vec<usize> = (1..x.len() - 1)
        .filter(|&i| x[i] >= x[i - 1] && x[i] > x[i + 1] && x[i] > 0.6 * top)
        .collect();
    cand.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
    let refractory = (0.12 * rate) as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for c in cand {
        if peaks.iter().all(|&p| p.abs_diff(c) > refractory) {
            peaks.push(c);
        }
    }
    peaks.sort_unstable();
    (peaks[peaks.len() - 1] - peaks[0]) as f64 / rate / (peaks.len() - 1) as f64
}

#[test]
fn tachycardia_records_have_short_peak_intervals() {
    let d = generate_synthetic_dataset(2000, 1, 11, &SyntheticSpec::default()).unwrap();
    let limit = 60.0 / TACHY_THRESHOLD_BPM;
    let (mut pos, mut ok, mut neg_ok, mut neg) = (0, 0, 0, 0);
    for (i, r) in d.records.iter().enumerate() {
        let interval = mean_peak_interval(r);
        if d.labels.get(i, 0) == Some(1.0) {
            pos += 1;
            ok += usize::from(interval < limit);
        } else {
            neg += 1;
            neg_ok += usize::from(interval >= limit);
        }
    }
    assert!(pos > 400);
    assert!(ok as f64 >= 0.99 * pos as f64, "{ok}/{pos}");
    assert!(neg_ok as f64 >= 0.99 * neg as f64, "{neg_ok}/{neg}");
}

#[test]
fn crop_offsets_are_uniform() {
    let r = EcgRecord::new("r", "s", 100, 1, (0..1000).map(f64::from).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let bins = 751;
    let mut counts = vec![0usize; bins];
    let draws = 10_000;
    for _ in 0..draws {
        let c = random_crop(&r, 2.5, &mut rng).unwrap();
        assert_eq!(c.n_samples(), 250);
        counts[c.lead(0)[0] as usize] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

fn strata_manifest(n_train: usize) -> SplitManifest {
    let mut m = SplitManifest::default();
    for i in 0..n_train + 40 {
        let id = format!("r{i}");
        m.strata.insert(
            id.clone(),
            Stratum {
                labels: if i % 3 == 0 { vec!["x".into()] } else { vec![] },
                age_bin: Some((i % 7) as u32),
                sex: None,
            },
        );
        let split = if i < n_train { 0 } else { 1 + usize::from(i >= n_train + 20) };
        m.subjects.insert(id.clone(), format!("s{split}-{}", i / 2));
        if i < n_train {
            m.train.push(id);
        } else if i < n_train + 20 {
            m.val.push(id);
        } else {
            m.test.push(id);
        }
    }
    m
}

#[test]
fn subsample_sizes() {
    let m = strata_manifest(1024);
    assert_eq!(stratified_subsample(&m, 1.0, 1).unwrap(), m);
    let s = stratified_subsample(&m, 1.0 / 128.0, 1).unwrap();
    assert_eq!(s.train.len(), 8);
    assert_eq!(s.val.len(), 0);
    assert_eq!(s.test, m.test);
    assert_eq!(stratified_subsample(&m, 0.25, 4).unwrap(), stratified_subsample(&m, 0.25, 4).unwrap());
    assert!(stratified_subsample(&m, 0.3, 1).is_err());
}

#[test]
fn subsample_keeps_label_proportion() {
    let m = strata_manifest(1024);
    let s = stratified_subsample(&m, 0.125, 3).unwrap();
    let with_x = s.train.iter().filter(|id| !m.strata[*id].labels.is_empty()).count();
    // 342 of 1024 carry the label
    assert!((42..=44).contains(&with_x), "{with_x}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subsample_preserves_subject_disjointness(n in 2usize..300, k in 0u32..=7, seed in any::<u64>()) {
        let m = strata_manifest(n);
        let s = stratified_subsample(&m, 0.5f64.powi(k as i32), seed).unwrap();
        s.validate(None).unwrap();
        prop_assert_eq!(s.train.len(), (n as f64 * 0.5f64.powi(k as i32)).round() as usize);
        prop_assert!(s.train.iter().all(|id| m.train.contains(id)));
    }

    #[test]
    fn window_count_is_floor(samples in 1usize..2000, win in 1usize..400) {
        prop_assume!(win <= samples);
        let r = EcgRecord::new("r", "s", 100, 1, vec![0.0; samples]).unwrap();
        let w = sliding_windows(&r, win as f64 / 100.0).unwrap();
        prop_assert_eq!(w.len(), samples / win);
    }

    #[test]
    fn znorm_inverse_is_identity(vals in prop::collection::vec((-1e3f64..1e3, any::<bool>()), 3..60)) {
        let values: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let mask: Vec<bool> = vals.iter().map(|v| v.1).collect();
        let m = LabelMatrix::new(vec![LabelKind::Continuous], values, mask).unwrap();
        let stats = fit_znorm(&m);
        let back = inverse_znorm(&apply_znorm(&m, &stats), &stats);
        for (i, (&a, &b)) in m.values().iter().zip(back.values()).enumerate() {
            if m.mask()[i] {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        if stats.is_normalized(0) {
            let z = apply_znorm(&m, &stats);
            let present: Vec<f64> = z.column(0).collect();
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / present.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
