use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BackboneConfig, ParamRole, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ECGW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    QueryAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub n_outputs: usize,
}

impl HeadConfig {
    pub fn param_specs(&self, model_dim: usize) -> Vec<ParamSpec> {
        let d = model_dim;
        let spec = |path: &str, shape: Vec<usize>| ParamSpec {
            path: path.into(),
            shape,
            role: ParamRole::Trainable,
            layer: None,
        };
        let mut out = Vec::new();
        if self.kind == HeadKind::QueryAttention {
            out.push(spec("head.query", vec![1, d, 1]));
            out.push(spec("head.key.weight", vec![d, d, 1]));
            out.push(spec("head.key.bias", vec![d]));
            out.push(spec("head.value.weight", vec![d, d, 1]));
            out.push(spec("head.value.bias", vec![d]));
        }
        out.push(spec("head.weight", vec![d, self.n_outputs]));
        out.push(spec("head.bias", vec![self.n_outputs]));
        out
    }
}

/// Where a set of weights came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// e.g. `random_init`, `cpc_pretrain`, `finetune`.
    pub stage: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Named parameter tensors together with the architecture that declares them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: BackboneConfig,
    pub head: Option<HeadConfig>,
    pub provenance: Provenance,
    pub seed: u64,
    /// Number of CPC prediction heads (`cpc.predict.{k}.weight`, k = 1..).
    pub cpc_steps: usize,
    tensors: BTreeMap<String, Tensor>,
}

fn cpc_specs(steps: usize, d: usize) -> Vec<ParamSpec> {
    (1..=steps)
        .map(|k| ParamSpec {
            path: format!("cpc.predict.{k}.weight"),
            shape: vec![d, d, 1],
            role: ParamRole::Trainable,
            layer: None,
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let name = spec.path.rsplit('.').next().unwrap_or_default();
    let shape = &spec.shape;
    match (spec.role, name) {
        (ParamRole::RunningMean, _) => Tensor::zeros(shape),
        (ParamRole::RunningVar, _) | (_, "gamma") | (_, "skip") => Tensor::full(shape, 1.0),
        (_, "beta") | (_, "bias") => Tensor::zeros(shape),
        (_, "log_dt") => Tensor::from_fn(shape, |_| rng.random_range(0.001f64.ln()..0.1f64.ln())),
        (_, "log_neg_re") => Tensor::full(shape, 0.5f64.ln()),
        (_, "im") => {
            let modes = shape[1];
            Tensor::from_fn(shape, |i| std::f64::consts::PI * (i % modes) as f64)
        }
        (_, "b_re") => Tensor::full(shape, 1.0),
        (_, "b_im") => Tensor::zeros(shape),
        (_, "c_re") | (_, "c_im") => {
            let normal = rand_distr::Normal::new(0.0, 0.5f64.sqrt()).expect("valid std");
            Tensor::from_fn(shape, |_| rng.sample(normal))
        }
        (_, "query") => uniform(rng, shape, 1.0 / (shape[1] as f64).sqrt()),
        _ => {
            // weights: [out, in, k] convs or [in, out] dense
            let fan_in = if shape.len() == 3 { shape[1] * shape[2] } else { shape[0] };
            uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
        }
    }
}

impl ModelWeights {
    /// Fresh initialization, deterministic in `seed`.
    pub fn init(config: &BackboneConfig, head: Option<HeadConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            tensors.insert(spec.path.clone(), init_tensor(&spec, &mut rng));
        }
        let mut w = ModelWeights {
            config: config.clone(),
            head: None,
            provenance: Provenance {
                stage: "random_init".into(),
                notes: Vec::new(),
            },
            seed,
            cpc_steps: 0,
            tensors,
        };
        if let Some(h) = head {
            w.set_head(h, seed.wrapping_add(1))?;
        }
        Ok(w)
    }

    /// Replaces any existing head with a freshly initialized one.
    pub fn set_head(&mut self, head: HeadConfig, seed: u64) -> Result<()> {
        if head.n_outputs == 0 {
            return Err(Error::Config("head needs at least one output".into()));
        }
        self.tensors.retain(|p, _| !p.starts_with("head."));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in head.param_specs(self.config.model_dim) {
            self.tensors.insert(spec.path.clone(), init_tensor(&spec, &mut rng));
        }
        self.head = Some(head);
        Ok(())
    }

    /// Adds freshly initialized CPC prediction heads, one per step offset.
    pub fn add_cpc_heads(&mut self, steps: usize, seed: u64) {
        self.strip_cpc_heads();
        self.cpc_steps = steps;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in cpc_specs(steps, self.config.model_dim) {
            self.tensors.insert(spec.path.clone(), init_tensor(&spec, &mut rng));
        }
    }

    pub fn strip_cpc_heads(&mut self) {
        self.tensors.retain(|p, _| !p.starts_with("cpc."));
        self.cpc_steps = 0;
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.config.param_specs();
        specs.extend(cpc_specs(self.cpc_steps, self.config.model_dim));
        if let Some(h) = &self.head {
            specs.extend(h.param_specs(self.config.model_dim));
        }
        specs
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Weights(format!("missing parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::Weights(format!("missing parameter `{path}`")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Backbone tensors only.
    pub fn backbone_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(p, _)| !p.starts_with("head.") && !p.starts_with("cpc."))
    }

    /// Every declared path present exactly once with its declared shape, and
    /// nothing else.
    pub fn validate(&self) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != self.tensors.len() {
            let declared: Vec<&str> = specs.iter().map(|s| s.path.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !declared.contains(&k.as_str())) {
                return Err(Error::Weights(format!("undeclared parameter `{extra}`")));
            }
        }
        for s in &specs {
            let t = self.get(&s.path)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Weights(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    s.path,
                    t.shape(),
                    s.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Weights(format!("`{}` holds non-finite values", s.path)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (path, t) in &self.tensors {
            entries.push(TensorEntry {
                path: path.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = Header {
            config: self.config.clone(),
            head: self.head,
            provenance: self.provenance.clone(),
            seed: self.seed,
            cpc_steps: self.cpc_steps,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Weights(m.into());
        if bytes.len() < 16 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(bad("not a weights file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        let body = &bytes[body_start..];
        let mut tensors = BTreeMap::new();
        let mut total = 0usize;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > body.len() {
                return Err(Error::Weights(format!("`{}` extends past end of file", e.path)));
            }
            let data = body[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            total += n;
            if tensors.insert(e.path.clone(), Tensor::new(&e.shape, data)?).is_some() {
                return Err(Error::Weights(format!("`{}` stored twice", e.path)));
            }
        }
        if total * 8 != body.len() {
            return Err(bad("trailing bytes after parameter blocks"));
        }
        let w = ModelWeights {
            config: header.config,
            head: header.head,
            provenance: header.provenance,
            seed: header.seed,
            cpc_steps: header.cpc_steps,
            tensors,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    path: String,
    shape: Vec<usize>,
    /// In f64 elements from the start of the body.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    head: Option<HeadConfig>,
    provenance: Provenance,
    seed: u64,
    #[serde(default)]
    cpc_steps: usize,
    tensors: Vec<TensorEntry>,
}
