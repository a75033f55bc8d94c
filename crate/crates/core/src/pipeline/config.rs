use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{ProtocolKind, TrainConfig};
use crate::backbones::{BackboneConfig, BackboneKind, ModelWeights, Scale};
use crate::cpc::CpcConfig;
use crate::dataio::SyntheticSpec;
use crate::error::{Error, Result};
use crate::stats::BootstrapConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// A dataset directory in the documented on-disk format.
    Path(PathBuf),
    Synthetic {
        n_records: usize,
        n_leads: usize,
        seed: u64,
        #[serde(default)]
        spec: SyntheticSpec,
        /// Expected digest of the stored dataset.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sha256: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInit {
    /// CPC pretraining on the train split, validated on the val split.
    Pretrain,
    Random,
    Weights(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub preset: BackboneKind,
    #[serde(default = "desk")]
    pub scale: Scale,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_dim: Option<usize>,
    pub init: ModelInit,
}

fn desk() -> Scale {
    Scale::Desk
}

impl ModelSpec {
    pub fn backbone(&self, n_leads: usize) -> BackboneConfig {
        let mut c = BackboneConfig::preset(self.preset, n_leads, self.scale);
        if let Some(d) = self.model_dim {
            c.model_dim = d;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub protocol: ProtocolKind,
    /// Fractions `1, 1/2, …, 2^-halvings` of the train and val splits.
    pub halvings: u32,
    pub seeds: Vec<u64>,
    /// Model whose fitted curve defines the label-efficiency targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_model: Option<String>,
    #[serde(default)]
    pub efficiency_sizes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub models: Vec<ModelSpec>,
    pub protocols: Vec<ProtocolKind>,
    #[serde(default)]
    pub pretrain: CpcConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSpec>,
    /// Parallel (model, protocol) jobs.
    #[serde(default = "one")]
    pub workers: usize,
    /// File whose SHA-256 is recorded in the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl BenchmarkConfig {
    /// Parses a config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: BenchmarkConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        if let DatasetSource::Path(p) = &mut cfg.dataset {
            fix(p);
        }
        for m in &mut cfg.models {
            if let ModelInit::Weights(p) = &mut m.init {
                fix(p);
            }
        }
        if let Some(p) = &mut cfg.ledger {
            fix(p);
        }
        Ok(cfg)
    }

    /// Copies the global seed into every seeded sub-config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self.bootstrap.seed = seed;
        self
    }

    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.id == id)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.models.is_empty() || self.protocols.is_empty() {
            return bad("at least one model and one protocol are required".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("model ids must be unique".into());
        }
        for m in &self.models {
            if m.id.is_empty() || !m.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!("model id `{}` must be non-empty [A-Za-z0-9_-]", m.id));
            }
            m.backbone(1).validate()?;
            match &m.init {
                ModelInit::Pretrain if m.preset != BackboneKind::EcgCpc => {
                    return bad(format!("model `{}`: only ecg_cpc backbones can be pretrained", m.id));
                }
                ModelInit::Weights(p) => {
                    if !p.is_file() {
                        return bad(format!("model `{}`: weights file {} does not exist", m.id, p.display()));
                    }
                    let w = ModelWeights::load(p)?;
                    let expected = m.backbone(w.config.n_leads);
                    if w.config != expected {
                        return bad(format!(
                            "model `{}`: weights in {} do not match the {} preset",
                            m.id,
                            p.display(),
                            m.preset.as_str()
                        ));
                    }
                }
                _ => {}
            }
        }
        match &self.dataset {
            DatasetSource::Path(p) if !p.join("manifest.json").is_file() => {
                return bad(format!("dataset directory {} has no manifest.json", p.display()));
            }
            DatasetSource::Synthetic { n_records, n_leads, .. } if *n_records == 0 || *n_leads == 0 => {
                return bad("synthetic dataset needs records and leads".into());
            }
            _ => {}
        }
        self.pretrain.validate()?;
        self.train.validate()?;
        self.bootstrap.validate()?;
        if let Some(s) = &self.scaling {
            if s.seeds.is_empty() {
                return bad("scaling needs at least one seed".into());
            }
            if let Some(r) = &s.reference_model {
                if self.model(r).is_none() {
                    return bad(format!("scaling reference `{r}` is not a configured model"));
                }
            }
            if s.efficiency_sizes.iter().any(|&n| !(n >= 1.0)) {
                return bad("efficiency sizes must be at least 1".into());
            }
        }
        Ok(())
    }
}
