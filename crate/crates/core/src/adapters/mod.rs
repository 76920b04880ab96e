//! LoRA-adapted feedforward output heads and the checkpoint format that
//! stores them.

mod checkpoint;
mod head;
mod lora;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use head::{trainable_params, HeadConfig, LoraHead};
pub use lora::{effective_rank, lora_param_count, LoraLinear};
