//! Training, inference and evaluation for the vessel segmentation network.
//!
//! * [`loss`]: segmentation and prompt losses as autodiff ops
//! * [`data`]: cases, label sources and the patch sampler
//! * [`train`](mod@train): the patch-based training loop
//! * [`infer`](mod@infer): sliding-window inference
//! * [`eval`]: metric reports (JSON + CSV)
//! * [`prompt`]: a small trainable promptable segmenter

pub mod data;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod prompt;
pub mod train;

pub use data::{load_cases, Case, LabelSource, PatchSampler};
pub use eval::{evaluate_dirs, evaluate_pairs, MetricReport};
pub use infer::infer;
pub use loss::{prompt_loss, seg_loss, PromptLossConfig};
pub use train::{train, LossRecord, TrainConfig, TrainOutcome};
pub use vessel_core::metrics;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("non-finite gradient for {param} at epoch {epoch}, step {step}")]
    NonFiniteGradient { epoch: usize, step: usize, param: String },
    #[error("unmatched cases: {0:?}")]
    Unmatched(Vec<String>),
    #[error(transparent)]
    Volume(#[from] vessel_core::VolumeError),
    #[error(transparent)]
    Net(#[from] dbfunet::NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
