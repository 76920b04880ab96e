//! Multi-task ECG ensemble: frozen heterogeneous experts, LoRA-adapted output
//! heads and a mixture-of-experts gate that mixes expert logits by a learned
//! weighted sum.

pub mod adapters;
pub mod error;
pub mod experts;
pub mod numerics;
pub mod signal;
pub mod task;
pub mod gating;
pub mod par;
pub mod pipeline;
pub mod saliency;

pub use error::{Error, Result};
