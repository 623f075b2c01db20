//! A lightweight 3D encoder-decoder for vessel lumen/wall segmentation,
//! with its own small reverse-mode autodiff engine.
//!
//! Building blocks: dense stride-2 downsampling ([`blocks::Dsd`]),
//! multi-kernel blocks with statistical channel attention
//! ([`blocks::Mlk`], [`blocks::Msda`]) and deep-to-shallow skip fusion
//! ([`blocks::Bff`]). All kernels are single-threaded and deterministic.

pub mod blocks;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{BackwardCtx, BackwardFn, Graph, Grads, Var};
pub use model::{estimate_macs, param_report, DbfUNet, NetConfig, ParamReport, Trace};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
