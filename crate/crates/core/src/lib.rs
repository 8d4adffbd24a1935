//! Neural-steered beamforming toolkit: STFT, array geometry, super-directive
//! beam banks, beam fusion, room simulation and objective metrics.

pub mod array;
pub mod beamformer;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod room;
pub mod sources;
pub mod stft;
pub mod tensor;

pub use error::{Error, Result};
