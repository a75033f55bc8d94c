//! Small model fixtures shared by backbone and acceptance tests.

use std::collections::BTreeMap;

use ecgbench::backbones::{
    backbone_forward, BackboneConfig, BackboneKind, Bound, ModelWeights, NormMode, ParamRole, Scale,
    SsmLayerParams,
};
use ecgbench::tensor::{gradient_check, Tensor};
use ecgbench::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A preset shrunk to a handful of channels and a single layer or block.
pub fn tiny_config(kind: BackboneKind) -> BackboneConfig {
    let mut c = BackboneConfig::preset(kind, 2, Scale::Desk);
    c.model_dim = 3;
    match kind {
        BackboneKind::EcgCpc | BackboneKind::S4Supervised => {
            c.n_ssm_layers = 1;
            c.state_dim = 4;
        }
        BackboneKind::CnnBaseline => c.cnn_blocks = 1,
    }
    c
}

/// Max relative finite-difference error of the summed, randomly projected
/// tokens with respect to the input and every trainable tensor.
pub fn backbone_gradcheck(kind: BackboneKind, mode: NormMode, seed: u64) -> Result<f64> {
    let cfg = tiny_config(kind);
    let mut weights = ModelWeights::init(&cfg, None, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Move away from symmetric initial values so every path carries gradient.
    let paths: Vec<String> = weights
        .param_specs()
        .into_iter()
        .filter(|s| s.role == ParamRole::Trainable)
        .map(|s| s.path)
        .collect();
    for p in &paths {
        for v in weights.get_mut(p)?.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        // dt in [0.2, 1)
        if p.ends_with("log_dt") {
            for v in weights.get_mut(p)?.data_mut() {
                *v = rng.random_range(0.2f64.ln()..0.0);
            }
        }
    }
    let t = 12;
    let mut inputs = vec![Tensor::from_fn(&[2, cfg.n_leads, t], |_| rng.random_range(-1.0..1.0))];
    inputs.extend(paths.iter().map(|p| weights.get(p).cloned().expect("declared")));
    let t_out = cfg.output_len(t).expect("long enough");
    let proj = Tensor::from_fn(&[2, cfg.model_dim, t_out], |_| rng.random_range(-1.0..1.0));
    gradient_check(
        |g, v| {
            let bound = Bound::from_vars(paths.iter().cloned().zip(v[1..].iter().copied()).collect::<BTreeMap<_, _>>());
            let out = backbone_forward(g, &weights, &bound, v[0], mode)?;
            let w = g.constant(proj.clone());
            let p = g.mul(out.tokens, w)?;
            Ok(g.sum_all(p))
        },
        &inputs,
        1e-5,
    )
}

/// Random diagonal SSM with decay rates and step sizes in the training ranges.
pub fn random_ssm(rng: &mut ChaCha8Rng, channels: usize, modes: usize) -> SsmLayerParams {
    let cn = channels * modes;
    let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    SsmLayerParams {
        channels,
        modes,
        log_dt: v(channels, 0.001f64.ln(), 0.1f64.ln()),
        log_neg_re: v(cn, -3.0, 1.0),
        im: v(cn, 0.0, 10.0),
        b_re: v(cn, -1.0, 1.0),
        b_im: v(cn, -1.0, 1.0),
        c_re: v(cn, -1.0, 1.0),
        c_im: v(cn, -1.0, 1.0),
        pair_factor: 2.0,
    }
}
