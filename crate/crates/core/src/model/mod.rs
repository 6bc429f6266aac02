//! The toy decoder-only transformer: configuration, weights, forward and
//! backward passes, losses, and the optimizer.

pub mod backward;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod loss;
pub mod optim;

pub use backward::{
    backward, backward_from_dlogits, backward_kl, BackwardResult, Gradients, KlBackwardResult,
};
pub use batch::TokenBatch;
pub use checkpoint::{expected_shapes, layer_names, Checkpoint, EMBED_IN, EMBED_OUT, FINAL_NORM};
pub use config::ModelConfig;
pub use forward::{forward, forward_with_trace, ForwardTrace, LayerTrace};
pub use loss::{kl_loss, ntp_loss, z_loss, LossSpec};
pub use optim::{adam_scalar, optimizer_step, OptimSettings, OptimizerState};
