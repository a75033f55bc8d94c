use std::collections::BTreeMap;

use super::config::{BackboneKind, ParamRole, ParamSpec, SSM_PARAM_NAMES};
use super::weights::{HeadKind, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Graph, Tensor, Var};

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Stored running statistics.
    Frozen,
}

/// Graph variables of the trainable tensors of one [`ModelWeights`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Adds every trainable tensor to `g`, as a parameter when `learn`
    /// accepts it and as a constant otherwise.
    pub fn bind(g: &mut Graph, weights: &ModelWeights, learn: impl Fn(&ParamSpec) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for spec in weights.param_specs() {
            if spec.role != ParamRole::Trainable {
                continue;
            }
            let t = weights.get(&spec.path)?.clone();
            let v = g.leaf(t, learn(&spec));
            vars.insert(spec.path, v);
        }
        Ok(Bound { vars })
    }

    /// Uses existing graph variables, e.g. inputs of a gradient check.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Bound {
        Bound { vars }
    }

    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Weights(format!("parameter `{path}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Batch statistics observed by one batch-norm layer in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `[B, D, T']`
    pub tokens: Var,
    /// `[B, D]`, mean of the tokens over time.
    pub pooled: Var,
    /// `[B, D, T']` input to the first SSM layer.
    pub encoded: Var,
    pub bn_stats: Vec<BnBatchStats>,
}

struct Ctx<'a> {
    weights: &'a ModelWeights,
    bound: &'a Bound,
    mode: NormMode,
    bn_stats: Vec<BnBatchStats>,
}

impl Ctx<'_> {
    fn p(&self, path: &str) -> Result<Var> {
        self.bound.var(path)
    }

    fn batchnorm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            NormMode::Train => {
                let (y, stats) = g.batchnorm1d(x, gamma, beta, BatchNormMode::Train)?;
                if let Some((mean, var)) = stats {
                    self.bn_stats.push(BnBatchStats {
                        prefix: prefix.to_string(),
                        mean,
                        var,
                    });
                }
                Ok(y)
            }
            NormMode::Frozen => {
                let mean = self.weights.get(&format!("{prefix}.running_mean"))?.data();
                let var = self.weights.get(&format!("{prefix}.running_var"))?.data();
                Ok(g.batchnorm1d(x, gamma, beta, BatchNormMode::Frozen { mean, var })?.0)
            }
        }
    }

    fn conv_bn_relu(&mut self, g: &mut Graph, x: Var, prefix: &str, stride: usize, pad: (usize, usize)) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = g.conv1d(x, w, stride, pad)?;
        let y = self.batchnorm(g, y, &format!("{prefix}.bn"))?;
        Ok(g.relu(y))
    }

    fn ssm_conv(&self, g: &mut Graph, h: Var, prefix: &str, len: usize) -> Result<Var> {
        let params: Vec<Var> = SSM_PARAM_NAMES
            .iter()
            .map(|name| self.p(&format!("{prefix}.{name}")))
            .collect::<Result<_>>()?;
        let params: [Var; 7] = params.try_into().expect("seven SSM parameters");
        let k = g.ssm_kernel(params, len, 2.0)?;
        g.causal_conv(h, k)
    }

    /// Pre-norm residual SSM layer:
    /// `x + W·GELU(K * LN(x) [+ reversed pass] + D ⊙ LN(x)) + b`.
    fn ssm_layer(&mut self, g: &mut Graph, x: Var, l: usize) -> Result<Var> {
        let t = g.shape(x)[2];
        let h = g.layernorm(x, self.p(&format!("ssm.{l}.norm.gamma"))?, self.p(&format!("ssm.{l}.norm.beta"))?)?;
        let mut y = self.ssm_conv(g, h, &format!("ssm.{l}.fwd"), t)?;
        if self.weights.config.bidirectional() {
            let hr = g.reverse_time(h)?;
            let yr = self.ssm_conv(g, hr, &format!("ssm.{l}.bwd"), t)?;
            let yr = g.reverse_time(yr)?;
            y = g.add(y, yr)?;
        }
        let skip = g.channel_mul(h, self.p(&format!("ssm.{l}.skip"))?)?;
        let y = g.add(y, skip)?;
        let y = g.gelu(y);
        let y = g.conv1d(y, self.p(&format!("ssm.{l}.out.weight"))?, 1, (0, 0))?;
        let y = g.bias_add(y, self.p(&format!("ssm.{l}.out.bias"))?)?;
        g.add(x, y)
    }

    fn residual_block(&mut self, g: &mut Graph, x: Var, b: usize) -> Result<Var> {
        let k = self.weights.config.cnn_kernel;
        let pad = ((k - 1) / 2, k / 2);
        let y = self.conv_bn_relu(g, x, &format!("block.{b}.conv0"), 1, pad)?;
        // second conv has its own BN; ReLU comes after the residual sum
        let w = self.p(&format!("block.{b}.conv1.weight"))?;
        let y = g.conv1d(y, w, 1, pad)?;
        let y = self.batchnorm(g, y, &format!("block.{b}.conv1.bn"))?;
        let y = g.add(x, y)?;
        Ok(g.relu(y))
    }
}

/// Shape and rate check for a backbone input `[B, leads, T]`.
pub fn check_input(weights: &ModelWeights, shape: &[usize], sampling_rate: u32) -> Result<()> {
    let c = &weights.config;
    if sampling_rate != c.input_hz {
        return Err(Error::InvalidParameter(format!(
            "{} expects {} Hz input, got {sampling_rate} Hz",
            c.kind.as_str(),
            c.input_hz
        )));
    }
    if shape.len() != 3 || shape[1] != c.n_leads || c.output_len(shape[2]).is_none() {
        return Err(Error::shape(
            "backbone_forward",
            format!("input {shape:?} for {} leads", c.n_leads),
        ));
    }
    Ok(())
}

/// Runs the backbone on `x: [B, leads, T]`.
pub fn backbone_forward(g: &mut Graph, weights: &ModelWeights, bound: &Bound, x: Var, mode: NormMode) -> Result<BackboneOutput> {
    let cfg = &weights.config;
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || xs[1] != cfg.n_leads || cfg.output_len(xs[2]).is_none() {
        return Err(Error::shape("backbone_forward", format!("input {xs:?} for {} leads", cfg.n_leads)));
    }
    let mut ctx = Ctx {
        weights,
        bound,
        mode,
        bn_stats: Vec::new(),
    };
    let mut h = x;
    match cfg.kind {
        BackboneKind::EcgCpc => {
            for (i, c) in cfg.encoder.iter().enumerate() {
                h = ctx.conv_bn_relu(g, h, &format!("encoder.{i}"), c.stride, cfg.encoder_padding(i))?;
            }
        }
        BackboneKind::S4Supervised => {
            h = g.conv1d(h, ctx.p("input.weight")?, 1, (0, 0))?;
            h = g.bias_add(h, ctx.p("input.bias")?)?;
        }
        BackboneKind::CnnBaseline => {
            let stride = cfg.encoder[0].stride;
            h = ctx.conv_bn_relu(g, h, "stem", stride, cfg.encoder_padding(0))?;
            for b in 0..cfg.cnn_blocks {
                h = ctx.residual_block(g, h, b)?;
            }
        }
    }
    let encoded = h;
    for l in 0..cfg.n_ssm_layers {
        h = ctx.ssm_layer(g, h, l)?;
    }
    if cfg.n_ssm_layers > 0 {
        h = g.layernorm(h, ctx.p("norm.gamma")?, ctx.p("norm.beta")?)?;
    }
    let pooled = g.mean(h, 2)?;
    Ok(BackboneOutput {
        tokens: h,
        pooled,
        encoded,
        bn_stats: ctx.bn_stats,
    })
}

/// Affine map `features · W + b` of `[B, D]` features.
pub fn linear_head(g: &mut Graph, features: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(features, w)?;
    g.bias_add(y, b)
}

/// Learnable-query attention pooling head.
#[derive(Clone, Copy, Debug)]
pub struct QueryAttentionParams {
    /// `[1, D, 1]`
    pub query: Var,
    pub key_w: Var,
    pub key_b: Var,
    pub value_w: Var,
    pub value_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Single-query, single-head attention over `tokens: [B, D, T]`. Returns the
/// outputs `[B, n_out]` and attention weights `[B, 1, T]`.
pub fn query_attention_head(g: &mut Graph, tokens: Var, p: &QueryAttentionParams) -> Result<(Var, Var)> {
    let d = g.shape(tokens)[1];
    let keys = g.conv1d(tokens, p.key_w, 1, (0, 0))?;
    let keys = g.bias_add(keys, p.key_b)?;
    let values = g.conv1d(tokens, p.value_w, 1, (0, 0))?;
    let values = g.bias_add(values, p.value_b)?;
    let scores = g.conv1d(keys, p.query, 1, (0, 0))?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let pooled = g.attn_pool(values, attn)?;
    Ok((linear_head(g, pooled, p.out_w, p.out_b)?, attn))
}

/// Applies the configured head to a backbone output.
pub fn head_forward(g: &mut Graph, weights: &ModelWeights, bound: &Bound, out: &BackboneOutput) -> Result<Var> {
    let head = weights
        .head
        .ok_or_else(|| Error::Weights("model has no head".into()))?;
    let w = bound.var("head.weight")?;
    let b = bound.var("head.bias")?;
    match head.kind {
        HeadKind::Linear => linear_head(g, out.pooled, w, b),
        HeadKind::QueryAttention => {
            let p = QueryAttentionParams {
                query: bound.var("head.query")?,
                key_w: bound.var("head.key.weight")?,
                key_b: bound.var("head.key.bias")?,
                value_w: bound.var("head.value.weight")?,
                value_b: bound.var("head.value.bias")?,
                out_w: w,
                out_b: b,
            };
            Ok(query_attention_head(g, out.tokens, &p)?.0)
        }
    }
}

/// Outputs of a gradient-free forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub tokens: Tensor,
    pub pooled: Tensor,
    /// Head outputs when the model has a head.
    pub outputs: Option<Tensor>,
}

/// Forward pass with frozen normalization statistics and no gradients.
pub fn infer(weights: &ModelWeights, x: &Tensor, sampling_rate: u32) -> Result<Inference> {
    check_input(weights, x.shape(), sampling_rate)?;
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, weights, |_| false)?;
    let xv = g.constant(x.clone());
    let out = backbone_forward(&mut g, weights, &bound, xv, NormMode::Frozen)?;
    let outputs = match weights.head {
        Some(_) => Some(head_forward(&mut g, weights, &bound, &out)?),
        None => None,
    };
    Ok(Inference {
        tokens: g.value(out.tokens).clone(),
        pooled: g.value(out.pooled).clone(),
        outputs: outputs.map(|v| g.value(v).clone()),
    })
}

/// Exponential moving update `running ← (1 - m)·running + m·batch`.
pub fn update_running_stats(weights: &mut ModelWeights, stats: &[BnBatchStats], momentum: f64) -> Result<()> {
    for s in stats {
        for (name, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let t = weights.get_mut(&format!("{}.{name}", s.prefix))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}
