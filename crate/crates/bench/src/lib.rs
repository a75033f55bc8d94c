//! Timing of the hot paths: AUROC, bootstrap, SSM kernels, convolutions and
//! scaling fits.

use std::hint::black_box;

use criterion::{BenchmarkId, Criterion};
use ecgbench::backbones::{BackboneConfig, BackboneKind, ModelWeights, Scale, SsmLayerParams};
use ecgbench::dataio::LabelKind;
use ecgbench::scaling::{fit_scaling_law, loss_at, ScalingFit, ScalingPoint};
use ecgbench::stats::{auroc, bootstrap_metric, BootstrapConfig, Metric, PredictionSet};
use ecgbench::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let s = labels.iter().map(|&y| rng.random::<f64>() + if y { 0.5 } else { 0.0 }).collect();
    (s, labels)
}

fn auroc_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("auroc");
    for n in [1_000, 100_000] {
        let (s, y) = scores(n, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| auroc(black_box(&s), &y)));
    }
    g.finish();
}

fn bootstrap_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 500;
    let (s, y) = scores(n, &mut rng);
    let preds = PredictionSet {
        model_id: "m".into(),
        task_id: "t".into(),
        record_ids: (0..n).map(|i| i.to_string()).collect(),
        label_names: vec!["y".into()],
        kinds: vec![LabelKind::Binary],
        scores: s,
        targets: y.iter().map(|&v| f64::from(u8::from(v))).collect(),
        mask: vec![true; n],
    };
    let cfg = BootstrapConfig { n_iterations: 200, ..Default::default() };
    c.bench_function("bootstrap_500x200", |b| b.iter(|| bootstrap_metric(black_box(&preds), Metric::MacroAuroc, &cfg)));
}

fn ssm_bench(c: &mut Criterion) {
    let cfg = BackboneConfig::preset(BackboneKind::EcgCpc, 1, Scale::Desk);
    let w = ModelWeights::init(&cfg, None, 0).unwrap();
    let p = SsmLayerParams::from_weights(&w, 0, "fwd").unwrap();
    let t = 512;
    let u: Vec<f64> = (0..cfg.model_dim * t).map(|i| (i as f64 * 0.01).sin()).collect();
    let mut g = c.benchmark_group("ssm_512");
    g.bench_function("fft", |b| b.iter(|| p.convolve_fft(black_box(&u), t)));
    g.bench_function("recurrence", |b| b.iter(|| p.recurrence(black_box(&u), t)));
    g.finish();
}

fn conv_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(&[32, 32, 300], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[32, 32, 5], |_| rng.random_range(-0.2..0.2));
    c.bench_function("conv1d_k5_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv1d(xv, wv, 1, (2, 2)).unwrap();
            let s = g.sum_all(y);
            g.backward(s).unwrap()
        })
    });
}

fn scaling_bench(c: &mut Criterion) {
    let truth = ScalingFit::new("m", 0.677, 0.206, 0.089);
    let pts: Vec<ScalingPoint> = (0..8)
        .map(|k| {
            let n = 250 << k;
            ScalingPoint { n, loss: loss_at(&truth, n as f64) }
        })
        .collect();
    c.bench_function("fit_scaling_law_8", |b| b.iter(|| fit_scaling_law("m", black_box(&pts))));
}

pub fn benchmarks(c: &mut Criterion) {
    auroc_bench(c);
    bootstrap_bench(c);
    ssm_bench(c);
    conv_bench(c);
    scaling_bench(c);
}
