//! Face anonymization by segmentation and semantic re-synthesis.
//!
//! A segmentation generator maps a face crop to an 11-label semantic mask, a
//! SPADE generator renders a different face from that mask, and the result
//! is pasted back over the face foreground while the background is kept
//! bit-exact.

pub mod anonymizer;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mask;
pub mod mask_algebra;
pub mod models;
pub mod nets;
pub mod objectives;
pub mod photo;
pub mod run;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
pub use mask::SemanticMask;
pub use photo::Photo;
