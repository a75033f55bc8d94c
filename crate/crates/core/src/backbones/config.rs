use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    EcgCpc,
    S4Supervised,
    /// Small residual 1-D CNN standing in for Net-1D.
    CnnBaseline,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::EcgCpc => "ecg_cpc",
            BackboneKind::S4Supervised => "s4_supervised",
            BackboneKind::CnnBaseline => "cnn_baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub n_leads: usize,
    pub model_dim: usize,
    /// States per channel; stored as `state_dim / 2` conjugate pairs.
    pub state_dim: usize,
    pub n_ssm_layers: usize,
    /// Convolutional encoder (CPC) or stem (CNN).
    pub encoder: Vec<ConvLayerSpec>,
    /// Residual blocks after the stem (CNN only).
    pub cnn_blocks: usize,
    pub cnn_kernel: usize,
    pub input_hz: u32,
    pub crop_s: f64,
    pub cpc_steps_ahead: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Trainable,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Position in the backbone layer list; `None` for head parameters.
    pub layer: Option<usize>,
}

pub const SSM_PARAM_NAMES: [&str; 7] = ["log_dt", "log_neg_re", "im", "b_re", "b_im", "c_re", "c_im"];

impl BackboneConfig {
    pub fn preset(kind: BackboneKind, n_leads: usize, scale: Scale) -> Self {
        let model_dim = match scale {
            Scale::Full => 512,
            Scale::Desk => 64,
        };
        match kind {
            BackboneKind::EcgCpc => BackboneConfig {
                kind,
                n_leads,
                model_dim,
                state_dim: 8,
                n_ssm_layers: 4,
                encoder: vec![
                    ConvLayerSpec { kernel: 3, stride: 2 },
                    ConvLayerSpec { kernel: 1, stride: 1 },
                    ConvLayerSpec { kernel: 1, stride: 1 },
                    ConvLayerSpec { kernel: 1, stride: 1 },
                ],
                cnn_blocks: 0,
                cnn_kernel: 0,
                input_hz: 240,
                crop_s: 2.5,
                cpc_steps_ahead: 14,
            },
            BackboneKind::S4Supervised => BackboneConfig {
                kind,
                n_leads,
                model_dim,
                state_dim: 8,
                n_ssm_layers: 4,
                encoder: Vec::new(),
                cnn_blocks: 0,
                cnn_kernel: 0,
                input_hz: 100,
                crop_s: 2.5,
                cpc_steps_ahead: 0,
            },
            BackboneKind::CnnBaseline => BackboneConfig {
                kind,
                n_leads,
                model_dim,
                state_dim: 0,
                n_ssm_layers: 0,
                encoder: vec![ConvLayerSpec { kernel: 7, stride: 2 }],
                cnn_blocks: 4,
                cnn_kernel: 5,
                input_hz: 100,
                crop_s: 2.5,
                cpc_steps_ahead: 0,
            },
        }
    }

    pub fn bidirectional(&self) -> bool {
        self.kind == BackboneKind::S4Supervised
    }

    pub fn modes(&self) -> usize {
        self.state_dim / 2
    }

    pub fn crop_samples(&self) -> usize {
        (self.crop_s * f64::from(self.input_hz)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.kind.as_str())));
        if self.n_leads == 0 || self.model_dim == 0 || self.input_hz == 0 {
            return bad("n_leads, model_dim and input_hz must be positive".into());
        }
        if self.encoder.iter().any(|c| c.kernel == 0 || c.stride == 0) {
            return bad("encoder kernels and strides must be positive".into());
        }
        match self.kind {
            BackboneKind::EcgCpc | BackboneKind::S4Supervised => {
                if self.n_ssm_layers == 0 || self.state_dim < 2 || self.state_dim % 2 != 0 {
                    return bad("needs SSM layers and an even state_dim of at least 2".into());
                }
                if self.kind == BackboneKind::EcgCpc && self.encoder.is_empty() {
                    return bad("ECG-CPC needs a convolutional encoder".into());
                }
                if self.kind == BackboneKind::S4Supervised && !self.encoder.is_empty() {
                    return bad("the supervised SSM has no convolutional encoder".into());
                }
            }
            BackboneKind::CnnBaseline => {
                if self.encoder.len() != 1 || self.cnn_kernel % 2 == 0 || self.n_ssm_layers != 0 {
                    return bad("needs exactly one stem conv, odd block kernel and no SSM layers".into());
                }
            }
        }
        if !(self.crop_s > 0.0) || self.crop_samples() == 0 {
            return bad("crop must contain at least one sample".into());
        }
        if self.output_len(self.crop_samples()).is_none() {
            return bad("crop too short for the encoder".into());
        }
        Ok(())
    }

    /// Zero padding `(left, right)` of encoder conv `i`.
    pub fn encoder_padding(&self, i: usize) -> (usize, usize) {
        let k = self.encoder[i].kernel;
        match self.kind {
            BackboneKind::CnnBaseline => ((k - 1) / 2, k / 2),
            _ => (k - 1, 0),
        }
    }

    /// Token count for an input of `t` samples.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        let mut t = t;
        for (i, c) in self.encoder.iter().enumerate() {
            let (l, r) = self.encoder_padding(i);
            let padded = t + l + r;
            if padded < c.kernel {
                return None;
            }
            t = (padded - c.kernel) / c.stride + 1;
        }
        (t > 0).then_some(t)
    }

    /// Input sample span `[t·jump - left, t·jump + right]` that can influence
    /// output position `t` through the convolutional part. SSM layers are
    /// excluded.
    pub fn receptive_field(&self) -> (usize, usize, usize) {
        let (mut left, mut right, mut jump) = (0usize, 0usize, 1usize);
        for (i, c) in self.encoder.iter().enumerate() {
            let (pl, _) = self.encoder_padding(i);
            left += pl * jump;
            right += (c.kernel - 1 - pl) * jump;
            jump *= c.stride;
        }
        for _ in 0..self.cnn_blocks {
            let half = (self.cnn_kernel - 1) / 2;
            left += 2 * half * jump;
            right += 2 * half * jump;
        }
        (left, right, jump)
    }

    /// Number of entries in the backbone layer list.
    pub fn n_layers(&self) -> usize {
        match self.kind {
            BackboneKind::EcgCpc => self.encoder.len() + self.n_ssm_layers,
            BackboneKind::S4Supervised => 1 + self.n_ssm_layers,
            BackboneKind::CnnBaseline => 1 + self.cnn_blocks,
        }
    }

    /// Every parameter and running statistic of the backbone.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.model_dim;
        let mut out = Vec::new();
        let mut push = |path: String, shape: Vec<usize>, role: ParamRole, layer: usize| {
            out.push(ParamSpec {
                path,
                shape,
                role,
                layer: Some(layer),
            })
        };
        let bn = |push: &mut dyn FnMut(String, Vec<usize>, ParamRole, usize), prefix: &str, layer: usize| {
            push(format!("{prefix}.gamma"), vec![d], ParamRole::Trainable, layer);
            push(format!("{prefix}.beta"), vec![d], ParamRole::Trainable, layer);
            push(format!("{prefix}.running_mean"), vec![d], ParamRole::RunningMean, layer);
            push(format!("{prefix}.running_var"), vec![d], ParamRole::RunningVar, layer);
        };
        match self.kind {
            BackboneKind::EcgCpc => {
                for (i, c) in self.encoder.iter().enumerate() {
                    let c_in = if i == 0 { self.n_leads } else { d };
                    push(format!("encoder.{i}.weight"), vec![d, c_in, c.kernel], ParamRole::Trainable, i);
                    bn(&mut push, &format!("encoder.{i}.bn"), i);
                }
            }
            BackboneKind::S4Supervised => {
                push("input.weight".into(), vec![d, self.n_leads, 1], ParamRole::Trainable, 0);
                push("input.bias".into(), vec![d], ParamRole::Trainable, 0);
            }
            BackboneKind::CnnBaseline => {
                let c = self.encoder[0];
                push("stem.weight".into(), vec![d, self.n_leads, c.kernel], ParamRole::Trainable, 0);
                bn(&mut push, "stem.bn", 0);
                for b in 0..self.cnn_blocks {
                    for j in 0..2 {
                        push(
                            format!("block.{b}.conv{j}.weight"),
                            vec![d, d, self.cnn_kernel],
                            ParamRole::Trainable,
                            b + 1,
                        );
                        bn(&mut push, &format!("block.{b}.conv{j}.bn"), b + 1);
                    }
                }
            }
        }
        let first_ssm = self.n_layers() - self.n_ssm_layers;
        let modes = self.modes();
        for l in 0..self.n_ssm_layers {
            let layer = first_ssm + l;
            push(format!("ssm.{l}.norm.gamma"), vec![d], ParamRole::Trainable, layer);
            push(format!("ssm.{l}.norm.beta"), vec![d], ParamRole::Trainable, layer);
            let dirs: &[&str] = if self.bidirectional() { &["fwd", "bwd"] } else { &["fwd"] };
            for dir in dirs {
                for (j, name) in SSM_PARAM_NAMES.iter().enumerate() {
                    let shape = if j == 0 { vec![d] } else { vec![d, modes] };
                    push(format!("ssm.{l}.{dir}.{name}"), shape, ParamRole::Trainable, layer);
                }
            }
            push(format!("ssm.{l}.skip"), vec![d], ParamRole::Trainable, layer);
            push(format!("ssm.{l}.out.weight"), vec![d, d, 1], ParamRole::Trainable, layer);
            push(format!("ssm.{l}.out.bias"), vec![d], ParamRole::Trainable, layer);
        }
        if self.n_ssm_layers > 0 {
            let last = self.n_layers() - 1;
            push("norm.gamma".into(), vec![d], ParamRole::Trainable, last);
            push("norm.beta".into(), vec![d], ParamRole::Trainable, last);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_keep_structural_counts() {
        for scale in [Scale::Full, Scale::Desk] {
            let c = BackboneConfig::preset(BackboneKind::EcgCpc, 12, scale);
            c.validate().unwrap();
            assert_eq!((c.state_dim, c.n_ssm_layers, c.input_hz, c.cpc_steps_ahead), (8, 4, 240, 14));
            assert_eq!(c.encoder[0], ConvLayerSpec { kernel: 3, stride: 2 });
            let s = BackboneConfig::preset(BackboneKind::S4Supervised, 12, scale);
            s.validate().unwrap();
            assert!(s.encoder.is_empty());
            assert_eq!((s.n_ssm_layers, s.input_hz, s.crop_s), (4, 100, 2.5));
            BackboneConfig::preset(BackboneKind::CnnBaseline, 12, scale).validate().unwrap();
        }
        assert_eq!(BackboneConfig::preset(BackboneKind::EcgCpc, 1, Scale::Desk).model_dim, 64);
    }

    #[test]
    fn cpc_token_count() {
        let c = BackboneConfig::preset(BackboneKind::EcgCpc, 12, Scale::Desk);
        assert_eq!(c.crop_samples(), 600);
        assert_eq!(c.output_len(600), Some(300));
    }

    #[test]
    fn unique_paths_and_layer_counts() {
        for kind in [BackboneKind::EcgCpc, BackboneKind::S4Supervised, BackboneKind::CnnBaseline] {
            let c = BackboneConfig::preset(kind, 3, Scale::Desk);
            let specs = c.param_specs();
            let mut paths: Vec<_> = specs.iter().map(|s| &s.path).collect();
            paths.sort();
            paths.dedup();
            assert_eq!(paths.len(), specs.len());
            let max_layer = specs.iter().filter_map(|s| s.layer).max().unwrap();
            assert_eq!(max_layer + 1, c.n_layers());
        }
    }
}
