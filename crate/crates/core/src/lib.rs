//! Activation-space LoRA transfer between toy transformers.
//!
//! The crate trains pairs of small decoder-only transformers with
//! mismatched widths, fine-tunes a LoRA on the source model, and transfers
//! it to the target by learning linear projections into and out of the
//! source activation space around the frozen LoRA kernel. Transfer quality
//! is scored against a retrained-LoRA ceiling and weight-space baselines.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`losses`], [`optim`], [`gradcheck`]: the dense
//!   f64 tensor engine with reverse-mode autodiff and Adam.
//! - [`transformer`]: the tiny decoder-only model with adapter slots.
//! - [`lora`]: standard LoRA adapters, training, freezing.
//! - [`cast`]: the projector-wrapped frozen kernel and its plumbing.
//! - [`distill`]: corpus generation and projector training on the
//!   KL + hidden-state MSE objective.
//! - [`task`], [`baselines`]: the synthetic downstream task, evaluation,
//!   ceiling/weight-space/naive baselines, and the ablation runner.
//! - [`artifacts`], [`pipeline`]: binary artifact formats, text reports,
//!   configuration, and the end-to-end stage driver used by the CLI.

pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod util;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
