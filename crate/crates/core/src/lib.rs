//! Stereo to 7.1.4 spatial audio generation with conditional flow matching
//! over a per-channel latent space.

pub mod audio;
pub mod codec;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod net;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod scene;
pub mod spatial;
pub mod tensor;
pub mod vbap;

pub use error::{Error, Result};
