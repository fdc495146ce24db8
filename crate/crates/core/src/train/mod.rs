//! Training: reverse-mode differentiation, the Adam optimizer, gradient
//! verification, checkpoint serialization, and the two-phase training loop.
//!
//! The [`Tape`] records every operation issued through the shared
//! [`crate::graph::Backend`] interface, so the differentiated forward pass is
//! the same code that runs during inference. Gradients are checked against
//! central finite differences in 64-bit precision; the training loop itself
//! runs in 32-bit.

mod adam;
mod checkpoint;
mod gradcheck;
mod tape;
mod trainer;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, state_fingerprint, TrainState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{
    check_all_primitives, check_generator_aux_gradient, finite_diff_gradcheck, GradcheckReport,
    DEFAULT_STEP_SIZE,
};
pub use tape::{NodeId, Tape, TapeGradients};
pub use trainer::{combined_objective, StepMetrics, TrainConfig, Trainer};
