//! Synthetic populations with planted rings, detection scoring, and the
//! clustering benchmarks.

pub mod bench;
pub mod detect;
pub mod evaluate;
pub mod generate;
pub mod spec;
pub mod training;
pub mod truth;

pub use generate::{generate, Population};
pub use spec::PopulationSpec;
pub use truth::GroundTruth;
