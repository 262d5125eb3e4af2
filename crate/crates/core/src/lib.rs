//! Few-shot recognition with a feedback loop between a 3D-aware view
//! synthesizer and a prototype classifier.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom3d;
pub mod nn;
pub mod pipeline;
pub mod recognition;
pub mod rng;
pub mod synthesis;
pub mod training;

pub use config::{AblationMode, Config, Phase};
pub use error::{Error, Result};
