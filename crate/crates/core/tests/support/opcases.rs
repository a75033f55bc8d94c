//! Random instances of every differentiable graph op, for finite-difference
//! checks.

use ecgbench::tensor::{BatchNormMode, Graph, Tensor, Var};
use ecgbench::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
    pub h: f64,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar objective `Σ w ⊙ out` with a fixed random `w`.
fn projected<F>(rng: &mut ChaCha8Rng, f: F) -> OpFn
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    let seed = rng.random::<u64>();
    Box::new(move |g, v| {
        let out = f(g, v)?;
        let mut wr = ChaCha8Rng::seed_from_u64(seed);
        let w = uniform(&mut wr, g.shape(out), -1.0, 1.0);
        let w = g.constant(w);
        let p = g.mul(out, w)?;
        Ok(g.sum_all(p))
    })
}

fn case<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, f: F) -> OpCase
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    OpCase {
        inputs,
        f: projected(rng, f),
        h: 1e-5,
    }
}

pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "bias_add",
    "channel_mul",
    "matmul",
    "conv1d",
    "tanh",
    "gelu",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "softmax",
    "sum",
    "mean",
    "sum_all",
    "mean_all",
    "batchnorm_train",
    "batchnorm_frozen",
    "layernorm",
    "causal_conv",
    "reverse_time",
    "ssm_kernel",
    "attn_pool",
    "pair_dot",
    "gather_positions",
    "reshape",
    "cross_entropy",
    "masked_bce",
    "masked_l1",
    "fft",
    "ifft",
];

pub fn make_case(name: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let b = rng.random_range(1..4);
    let c = rng.random_range(1..5);
    let t = rng.random_range(2..10);
    let bct = [b, c, t];
    match name {
        "add" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0), uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, |g, v| g.add(v[0], v[1]))
        }
        "sub" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0), uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, |g, v| g.sub(v[0], v[1]))
        }
        "mul" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0), uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, |g, v| g.mul(v[0], v[1]))
        }
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            let i = vec![uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, move |g, v| Ok(g.scale(v[0], s)))
        }
        "bias_add" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)];
            case(rng, i, |g, v| g.bias_add(v[0], v[1]))
        }
        "channel_mul" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)];
            case(rng, i, |g, v| g.channel_mul(v[0], v[1]))
        }
        "matmul" => {
            let n = rng.random_range(1..5);
            let i = vec![uniform(rng, &[b, c], -1.0, 1.0), uniform(rng, &[c, n], -1.0, 1.0)];
            case(rng, i, |g, v| g.matmul(v[0], v[1]))
        }
        "conv1d" => {
            let k = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let co = rng.random_range(1..4);
            let pad = (rng.random_range(0..3), rng.random_range(0..2));
            let t = t + k;
            let i = vec![uniform(rng, &[b, c, t], -1.0, 1.0), uniform(rng, &[co, c, k], -1.0, 1.0)];
            case(rng, i, move |g, v| g.conv1d(v[0], v[1], stride, pad))
        }
        "tanh" => unary(rng, &bct, |g, x| g.tanh(x), false),
        "gelu" => unary(rng, &bct, |g, x| g.gelu(x), false),
        "exp" => unary(rng, &bct, |g, x| g.exp(x), false),
        "log" => {
            let i = vec![uniform(rng, &bct, 0.2, 2.0)];
            case(rng, i, |g, v| Ok(g.log(v[0])))
        }
        "sigmoid" => unary(rng, &bct, |g, x| g.sigmoid(x), false),
        "relu" => unary(rng, &bct, |g, x| g.relu(x), true),
        "softmax" => {
            let axis = rng.random_range(0..3);
            let i = vec![uniform(rng, &bct, -2.0, 2.0)];
            case(rng, i, move |g, v| g.softmax(v[0], axis))
        }
        "sum" => {
            let axis = rng.random_range(0..3);
            let i = vec![uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, move |g, v| g.sum(v[0], axis))
        }
        "mean" => {
            let axis = rng.random_range(0..3);
            let i = vec![uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, move |g, v| g.mean(v[0], axis))
        }
        "sum_all" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, |g, v| Ok(g.sum_all(v[0])))
        }
        "mean_all" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, |g, v| Ok(g.mean_all(v[0])))
        }
        "batchnorm_train" => {
            let bct = [b + 1, c, t];
            let i = vec![
                uniform(rng, &bct, -2.0, 2.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ];
            case(rng, i, |g, v| Ok(g.batchnorm1d(v[0], v[1], v[2], BatchNormMode::Train)?.0))
        }
        "batchnorm_frozen" => {
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let i = vec![
                uniform(rng, &bct, -2.0, 2.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ];
            case(rng, i, move |g, v| {
                Ok(g
                    .batchnorm1d(v[0], v[1], v[2], BatchNormMode::Frozen { mean: &mean, var: &var })?
                    .0)
            })
        }
        "layernorm" => {
            let bct = [b, c + 1, t];
            let i = vec![
                uniform(rng, &bct, -2.0, 2.0),
                uniform(rng, &[c + 1], 0.5, 1.5),
                uniform(rng, &[c + 1], -0.5, 0.5),
            ];
            case(rng, i, |g, v| g.layernorm(v[0], v[1], v[2]))
        }
        "causal_conv" => {
            let l = rng.random_range(1..(2 * t));
            let i = vec![uniform(rng, &bct, -1.0, 1.0), uniform(rng, &[c, l], -1.0, 1.0)];
            case(rng, i, |g, v| g.causal_conv(v[0], v[1]))
        }
        "reverse_time" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, |g, v| g.reverse_time(v[0]))
        }
        "ssm_kernel" => {
            let n = rng.random_range(1..5);
            let len = rng.random_range(1..40);
            let mut i = vec![uniform(rng, &[c], (0.01f64).ln(), (0.5f64).ln())];
            i.push(uniform(rng, &[c, n], -1.0, 0.3));
            i.push(Tensor::from_fn(&[c, n], |j| std::f64::consts::PI * (j % n) as f64 + 0.1));
            for _ in 0..4 {
                i.push(uniform(rng, &[c, n], -1.0, 1.0));
            }
            case(rng, i, move |g, v| {
                g.ssm_kernel([v[0], v[1], v[2], v[3], v[4], v[5], v[6]], len, 2.0)
            })
        }
        "attn_pool" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0), uniform(rng, &[b, 1, t], 0.0, 1.0)];
            case(rng, i, |g, v| g.attn_pool(v[0], v[1]))
        }
        "pair_dot" => {
            let n = b * t;
            let pairs: Vec<(usize, usize)> = (0..rng.random_range(1..12))
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .collect();
            let i = vec![uniform(rng, &bct, -1.0, 1.0), uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, move |g, v| g.pair_dot(v[0], v[1], pairs.clone()))
        }
        "gather_positions" => {
            let positions: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..b * t)).collect();
            let i = vec![uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, move |g, v| g.gather_positions(v[0], positions.clone()))
        }
        "reshape" => {
            let i = vec![uniform(rng, &bct, -1.0, 1.0)];
            case(rng, i, move |g, v| g.reshape(v[0], &[b * c, t]))
        }
        "cross_entropy" => {
            let k = c + 1;
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let i = vec![uniform(rng, &[b, k], -2.0, 2.0)];
            OpCase {
                inputs: i,
                f: Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
                h: 1e-5,
            }
        }
        "masked_bce" => {
            let n = b * c;
            let targets: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            let i = vec![uniform(rng, &[b, c], -2.0, 2.0)];
            OpCase {
                inputs: i,
                f: Box::new(move |g, v| Ok(g.masked_bce(v[0], &targets, &mask)?.expect("mask non-empty"))),
                h: 1e-5,
            }
        }
        "masked_l1" => {
            let n = b * c;
            let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            // keep predictions at least 0.05 away from their targets
            let preds: Vec<f64> = targets
                .iter()
                .map(|t| t + if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.05..1.0))
                .collect();
            let i = vec![Tensor::new(&[b, c], preds).unwrap()];
            OpCase {
                inputs: i,
                f: Box::new(move |g, v| Ok(g.masked_l1(v[0], &targets, &mask)?.expect("mask non-empty"))),
                h: 1e-5,
            }
        }
        "fft" | "ifft" => {
            let len = rng.random_range(1usize..9);
            let n = len.next_power_of_two() * if rng.random_bool(0.5) { 2 } else { 1 };
            let inverse = name == "ifft";
            let i = vec![uniform(rng, &[b, 2, len], -1.0, 1.0)];
            case(rng, i, move |g, v| if inverse { g.ifft(v[0], n) } else { g.fft(v[0], n) })
        }
        other => panic!("no case for op {other}"),
    }
}

fn unary(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    f: fn(&mut Graph, Var) -> Var,
    kink_at_zero: bool,
) -> OpCase {
    let x = if kink_at_zero {
        away_from_zero(rng, shape)
    } else {
        uniform(rng, shape, -2.0, 2.0)
    };
    case(rng, vec![x], move |g, v| Ok(f(g, v[0])))
}
