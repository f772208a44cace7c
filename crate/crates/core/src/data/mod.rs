//! Synthetic task data.

pub mod dataset;
pub mod generate;
pub mod vocab;

pub use dataset::Dataset;
pub use generate::{Generator, Sample, Split};
pub use vocab::Vocab;
