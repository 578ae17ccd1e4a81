//! Guided flow-matching editing of voxel assets.
//!
//! The crate covers the whole toy pipeline: procedural CSG assets and their
//! logit latents ([`grid`], [`shape`]), conditional rectified-flow velocity
//! fields ([`flow`]), silhouette guidance ([`silhouette`]), the masked and
//! guided source-to-target editing flow ([`flowedit`]), masked repainting of
//! appearance features ([`repaint`]), surface extraction with multi-view
//! texture fusion ([`mesh`]) and the end-to-end benchmark harness
//! ([`pipeline`]).

pub mod error;
pub mod flow;
pub mod flowedit;
pub mod grid;
pub mod mesh;
pub mod pipeline;
pub mod repaint;
pub mod rng;
pub mod shape;
pub mod silhouette;

pub use error::{Error, Result};
pub use grid::{EditMask, StructureLatent, VoxelGrid};
