//! ECG-CPC, supervised SSM and CNN backbones with their prediction heads.

mod config;
mod forward;
mod ssm;
mod weights;

pub use config::{BackboneConfig, BackboneKind, ConvLayerSpec, ParamRole, ParamSpec, Scale, SSM_PARAM_NAMES};
pub use forward::{
    backbone_forward, check_input, head_forward, infer, linear_head, query_attention_head, update_running_stats,
    BackboneOutput, BnBatchStats, Bound, Inference, NormMode, QueryAttentionParams,
};
pub use ssm::SsmLayerParams;
pub use weights::{HeadConfig, HeadKind, ModelWeights, Provenance, WEIGHTS_MAGIC, WEIGHTS_VERSION};
