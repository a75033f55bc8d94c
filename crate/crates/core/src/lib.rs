#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod backbones;
pub mod cpc;
pub mod dataio;
pub mod error;
pub mod optim;
pub mod pipeline;
pub mod scaling;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
