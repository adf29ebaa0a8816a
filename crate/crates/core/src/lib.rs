//! Text-to-video temporal grounding with local-global video-text interactions.

pub mod data;
pub mod encoders;
pub mod error;
pub mod head;
pub mod lgvti;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sqan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
