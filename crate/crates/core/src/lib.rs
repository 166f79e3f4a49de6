//! Multi-view inpainting augmentation for robot manipulation episodes.
//!
//! The toolkit converts multi-view manipulation episodes into diverse,
//! temporally and cross-view consistent synthetic observations:
//!
//! 1. action-guided segmentation of the robot arm and the interacted object
//!    ([`keyframe`], [`segmentation`]), driven by off-the-shelf models behind
//!    client traits with deterministic stubs ([`clients`]);
//! 2. curation of a visual-identity pool from panoptic crops ([`identity`])
//!    and assembly of model-ready conditioning bundles ([`assembly`]);
//! 3. a desk-scale multi-view inpainting video diffusion transformer with
//!    low-rank adapters ([`diffusion`]);
//! 4. a cross-view consistency evaluation harness ([`eval`]) and a staged,
//!    resumable pipeline runner ([`pipeline`]).

pub mod assembly;
pub mod clients;
pub mod diffusion;
pub mod episode;
pub mod error;
pub mod eval;
pub mod identity;
pub mod keyframe;
pub mod pipeline;
pub mod segmentation;
pub mod util;

pub use error::{Error, Result};
