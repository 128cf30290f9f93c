//! Cross-modal correspondence detection for user-defined keyword spotting.
//!
//! Speech and enrolled text keywords are embedded into a shared space, an
//! attention map between them is scored by a recurrent discriminator, and the
//! whole stack is trained with de-noising, monotonic-matching and focal
//! detection losses.

pub mod autodiff;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{finite_diff_check, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
