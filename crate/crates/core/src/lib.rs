//! Procedural synthetic H&E colon-tissue images with exact ground truth,
//! scene-level and label-level uncertainty sliders, and an uncertainty
//! quantification harness that works on any model's softmax samples.
//!
//! The pipeline is:
//!
//! 1. [`config::SceneConfig`] fixes every parameter of one scene.
//! 2. [`scenegen::assemble_scene`] builds the 3D world (crypts, cells, distractors).
//! 3. [`render::render_scene`] sections the world with a slab and composites an
//!    absorbance image together with semantic, instance and depth masks.
//! 4. [`perturb`] and [`labelnoise`] manipulate scenes and masks.
//! 5. [`uq`] decomposes predictive entropy of a [`uq::ProbStack`] into aleatoric
//!    and epistemic parts and aggregates per-image scores; [`mockpred`] produces
//!    stacks with known uncertainty structure for testing the harness.

pub mod config;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod labelnoise;
pub mod mockpred;
pub mod perturb;
pub mod render;
pub mod scenegen;
pub mod seed;
pub mod uq;

pub use config::{SceneConfig, ValidatedConfig};
pub use error::{Error, Result};
pub use render::RenderOutput;
pub use scenegen::SceneGraph;
pub use uq::{ProbStack, UncMaps};
