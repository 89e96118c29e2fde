//! Motion-aware appearance propagation for synthetic videos.
//!
//! Re-renders every frame of a clip to match an edited reference frame
//! while preserving the motion encoded in per-frame depth maps. The stack
//! is trained from scratch on CPU: a dense-tensor autodiff substrate, a
//! discrete diffusion schedule with zero-terminal-SNR rescaling and
//! v-prediction, a small frame autoencoder, a reference-frame token
//! adaptor, a depth-conditioned denoiser, the autoregressive propagation
//! pipeline, a synthetic moving-shapes corpus with analytic depth, and the
//! training/evaluation harness plus CLI that tie it together.

pub mod adaptor;
pub mod codec;
pub mod diffusion;
pub mod digest;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod pipeline;
pub mod propnet;
pub mod rng;
pub mod schedule;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
