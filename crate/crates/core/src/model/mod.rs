//! Trainable parameters: the affine adapter, the linear two-class head, and
//! the real/fake prompt anchors, with forward passes and checkpointing.

mod checkpoint;
mod state;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use state::{load_anchor_file, ModelState, Optimizers, Phase, Prediction};
