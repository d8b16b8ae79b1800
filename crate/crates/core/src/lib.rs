pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod fidelity;
pub mod imageio;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod summarizer;
pub mod synth;
pub mod textcond;

pub use error::{Error, Result};
