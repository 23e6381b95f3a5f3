//! Fact-grounded attention: attention scores biased by an external knowledge
//! base through a grounding matrix, gated per token, with hard vocabulary
//! constraints for high-confidence factual answers.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod constrain;
pub mod error;
pub mod eval;
pub mod gate_train;
pub mod generate;
pub mod kb;
pub mod linalg;
pub mod linker;
pub mod model;
pub mod samples;
pub mod text;

pub use error::{Error, Result};
