//! Morphological-reconstruction microbubble localization for
//! super-resolution ultrasound.
//!
//! The pipeline runs clutter filtering ([`svd_filter`]), up-sampling and
//! smoothing ([`preprocess`]), h-dome peak extraction ([`morphology`]),
//! sub-pixel localization ([`localize`]) and density rendering
//! ([`render`]). [`evaluate`] and [`track`] score the results and
//! [`synth`] generates phantoms with known ground truth.

pub mod error;
pub mod evaluate;
pub mod grid;
pub mod localize;
pub mod morphology;
pub mod pipeline;
pub mod preprocess;
pub mod render;
pub mod svd_filter;
pub mod synth;
pub mod track;

pub use error::{Error, Result};
