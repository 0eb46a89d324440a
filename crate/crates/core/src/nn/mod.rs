//! Minimal dense network engine over flat parameter vectors.

mod gradcheck;
mod loss;
mod model;
mod optim;
mod params;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use loss::{bce_from_probabilities, bce_loss, cosine_similarity, cosine_with_grad, model_contrastive_loss};
pub use model::{
    backward, build_model, commit_running_stats, forward, sigmoid, Batch, BnTrace, ForwardTrace, LayerTrace, Mode,
};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{Layout, ModelSpec, ParamVector, Segment, SegmentKind};
