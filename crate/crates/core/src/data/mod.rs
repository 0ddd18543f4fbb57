//! Studies, sampling, synthetic generation, manifests, and ICD-10 labels.

pub mod icd;
pub mod manifest;
pub mod sampling;
pub mod study;
pub mod synth;

pub use study::{Frame, Study};
