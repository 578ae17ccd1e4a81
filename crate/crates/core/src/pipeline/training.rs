//! Training the structure and appearance flow models from edit cases.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Config, ModelConfig};
use super::data::{
    appearance_field, color_thumbnail, feature_activity, structure_condition, structure_latent,
    EditCase,
};
use super::{FEATURE_DIM, FEATURE_RES, LATENT_RES, THUMB_RES};
use crate::error::{Error, Result};
use crate::flow::{data_stats, train, Condition, MlpConfig, MlpModel, TrainExample, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Structure,
    Appearance,
}

impl Which {
    pub fn checkpoint_name(self) -> &'static str {
        match self {
            Which::Structure => "structure.ckpt",
            Which::Appearance => "appearance.ckpt",
        }
    }

    pub fn dims(self) -> (usize, usize) {
        match self {
            Which::Structure => (LATENT_RES.pow(3), LATENT_RES.pow(2)),
            Which::Appearance => (FEATURE_RES.pow(3) * FEATURE_DIM, THUMB_RES * THUMB_RES * 3),
        }
    }
}

/// Source and target assets of every case as training pairs.
pub fn examples(which: Which, cases: &[EditCase]) -> Result<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(2 * cases.len());
    for c in cases {
        for (tree, palette) in [
            (&c.source, &c.source_palette),
            (&c.target, &c.target_palette),
        ] {
            let grid = crate::shape::rasterize(tree, super::GRID_RES)?;
            out.push(match which {
                Which::Structure => {
                    let latent = structure_latent(&grid);
                    TrainExample {
                        cond: structure_condition(&latent),
                        x0: latent.into_logits(),
                    }
                }
                Which::Appearance => {
                    let field = appearance_field(tree, &grid, palette, feature_activity(&grid))?;
                    TrainExample {
                        cond: Condition::new(color_thumbnail(tree, &grid, palette)),
                        x0: field.features().to_vec(),
                    }
                }
            });
        }
    }
    Ok(out)
}

pub fn new_model(which: Which, mc: &ModelConfig, data: &[TrainExample]) -> Result<MlpModel> {
    let (dim, cond_dim) = which.dims();
    let mut cfg = MlpConfig::new(dim, cond_dim);
    cfg.hidden = mc.hidden;
    cfg.depth = mc.depth;
    cfg.cond_hidden = mc.cond_hidden;
    cfg.time_freqs = mc.time_freqs;
    let (mean, std) = data_stats(data);
    cfg.data_mean = mean;
    cfg.data_std = std.max(1e-3);
    MlpModel::new(cfg, mc.init_seed)
}

/// Split off the last `fraction` of cases (at least one when the fraction
/// is positive and more than one case exists) for held-out evaluation.
pub fn split_heldout(cases: &[EditCase], fraction: f64) -> (&[EditCase], &[EditCase]) {
    let n = cases.len();
    let k = if fraction > 0.0 && n > 1 {
        ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1)
    } else {
        0
    };
    cases.split_at(n - k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub which: Which,
    pub examples: usize,
    pub heldout_examples: usize,
    pub initial_heldout: f64,
    pub final_heldout: f64,
    /// `1 - final / initial`.
    pub heldout_drop: f64,
    /// Mean training loss over each tenth of the run.
    pub loss_curve: Vec<f64>,
}

fn summarize(which: Which, n: usize, nh: usize, r: &TrainReport) -> TrainSummary {
    let chunk = r.losses.len().div_ceil(10).max(1);
    TrainSummary {
        which,
        examples: n,
        heldout_examples: nh,
        initial_heldout: r.initial_heldout,
        final_heldout: r.final_heldout,
        heldout_drop: 1.0 - r.final_heldout / r.initial_heldout,
        loss_curve: r
            .losses
            .chunks(chunk)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect(),
    }
}

pub fn train_model(
    which: Which,
    train_cases: &[EditCase],
    heldout_cases: &[EditCase],
    cfg: &Config,
    progress: impl FnMut(usize, f64),
) -> Result<(MlpModel, TrainSummary)> {
    if train_cases.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let data = examples(which, train_cases)?;
    let heldout = examples(which, heldout_cases)?;
    let mut model = new_model(which, &cfg.model, &data)?;
    let report = train(&mut model, &data, &heldout, &cfg.train, progress)?;
    Ok((model, summarize(which, data.len(), heldout.len(), &report)))
}

/// Train and write `<which>.ckpt` plus `<which>_train.json` into `out`.
pub fn train_to_dir(
    which: Which,
    train_cases: &[EditCase],
    heldout_cases: &[EditCase],
    cfg: &Config,
    out: &Path,
    progress: impl FnMut(usize, f64),
) -> Result<(TrainSummary, Vec<PathBuf>)> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (model, summary) = train_model(which, train_cases, heldout_cases, cfg, progress)?;
    let ckpt = out.join(which.checkpoint_name());
    model.save(&ckpt)?;
    let name = match which {
        Which::Structure => "structure_train.json",
        Which::Appearance => "appearance_train.json",
    };
    let report = out.join(name);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
    Ok((summary, vec![ckpt, report]))
}

pub fn load_checkpoint(dir: &Path, which: Which) -> Result<MlpModel> {
    let p = dir.join(which.checkpoint_name());
    if !p.is_file() {
        return Err(Error::Config(format!("missing checkpoint {}", p.display())));
    }
    let m = MlpModel::load(&p)?;
    if (m.dim(), m.cond_dim()) != which.dims() {
        return Err(Error::Config(format!(
            "checkpoint {} has shape {}x{}, expected {}x{}",
            p.display(),
            m.dim(),
            m.cond_dim(),
            which.dims().0,
            which.dims().1
        )));
    }
    Ok(m)
}
