//! Experiment workbench for probing whether convolutional networks use the
//! spatial arrangement of their features: residual networks with a prescribed
//! effective receptive field (ERF), frozen-base/follow-up composition with
//! feature scrambling, representational similarity analysis and minimal
//! recognizable configuration (MIRC) search, all runnable on synthetic
//! texture-diagnostic and shape-diagnostic datasets.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mirc;
pub mod plan;
pub mod rng;
pub mod rsa;
pub mod stats;
pub mod tensor;

pub use error::{EscError, Result};
