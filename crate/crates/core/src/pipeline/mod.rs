//! End-to-end benchmark harness: procedural cases, model training, the edit
//! pipeline and its metrics.

pub mod config;
pub mod data;
pub mod edit;
pub mod manifest;
pub mod metrics;
pub mod run;
pub mod training;

/// Mesh-space grid resolution of every asset.
pub const GRID_RES: usize = 32;
/// Structure latent resolution.
pub const LATENT_RES: usize = 16;
/// Appearance feature grid resolution.
pub const FEATURE_RES: usize = 8;
/// Channels per appearance voxel: RGB plus a material scalar.
pub const FEATURE_DIM: usize = 4;
/// Side of the front colour thumbnail conditioning the appearance model.
pub const THUMB_RES: usize = 16;
pub const LOGIT_MARGIN: f64 = crate::grid::DEFAULT_LOGIT_MARGIN;

pub use config::Config;
pub use data::{EditCase, EditKind};
pub use edit::{run_case, CaseOutput, Models};
pub use metrics::{evaluate, CaseMetrics, MetricsReport};
pub use run::{gen_data, load_cases, run_edits};
pub use training::{train_to_dir, Which};
