//! Task-adapted diffusion for blind JPEG restoration.
//!
//! A forward SDE drifts clean images toward their corrupted versions while
//! adding noise; a score network trained by denoising score matching then
//! drives the reverse-time process from a noisy corrupted image back to a
//! plausible clean one.

pub mod error;
pub mod field;
pub mod forward;
pub mod io;
pub mod jpeg;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod samplers;
pub mod score;
pub mod sde;

pub use error::{Error, Result};
pub use field::ImageField;
