//! Simulation and analysis toolkit for an electrically triggered spin-photon
//! emitter: spin and cavity model, pulse timelines, Monte Carlo time-tag
//! generation, tag-stream processing, fitting, and spin-fidelity analysis.

pub mod analysis;
pub mod error;
pub mod fit;
pub mod model;
pub mod sim;
pub mod spam;
pub mod tagstore;
pub mod timeline;

pub use error::{Error, Result};
