//! Span-based open-label named entity recognition.

pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod spans;
pub mod synth;
pub mod train;
