//! Per-case scores, their aggregation, and run-directory evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::EditKind;
use crate::error::{Error, Result};
use crate::grid::{EditMask, VoxelGrid};

/// Intersection over union of the `≥ 0.5` occupancies, ignoring voxels
/// where `exclude` is nonzero. Two empty sets score 1.
pub fn occupancy_iou(a: &VoxelGrid, b: &VoxelGrid, exclude: Option<&EditMask>) -> Result<f64> {
    if a.res() != b.res() || exclude.is_some_and(|m| m.res() != a.res()) {
        return Err(Error::invalid(
            "occupancy IoU needs grids of one resolution",
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (v, (&x, &y)) in a.values().iter().zip(b.values()).enumerate() {
        if exclude.is_some_and(|m| m.weights()[v] > 0.0) {
            continue;
        }
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub kind: Option<EditKind>,
    pub ok: bool,
    pub error: Option<String>,
    /// Edited front silhouette against the target silhouette.
    pub silhouette_iou: f64,
    /// The same score for the unedited source, as a reference.
    pub source_silhouette_iou: f64,
    /// Edited against source occupancy outside the edit mask.
    pub preservation_iou: f64,
    /// Vertex-cloud Chamfer distance to the target surface; absent when
    /// either surface is empty.
    pub chamfer: Option<f64>,
    pub final_energy: f64,
    /// Mean absolute colour error of texels inside the edit region against
    /// the target appearance; absent when no surface was textured.
    pub texture_error: Option<f64>,
}

impl CaseMetrics {
    pub fn failed(id: &str, error: impl Into<String>) -> Self {
        Self {
            id: id.to_string(),
            kind: None,
            ok: false,
            error: Some(error.into()),
            silhouette_iou: 0.0,
            source_silhouette_iou: 0.0,
            preservation_iou: 0.0,
            chamfer: None,
            final_energy: 0.0,
            texture_error: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub silhouette_iou: f64,
    pub source_silhouette_iou: f64,
    pub preservation_iou: f64,
    pub chamfer: Option<f64>,
    pub final_energy: f64,
    pub texture_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub completed: usize,
    pub failed: usize,
    /// Means over completed cases.
    pub means: Means,
    pub cases: Vec<CaseMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Fold rows (already in case-id order) into a report.
pub fn aggregate(cases: Vec<CaseMetrics>) -> MetricsReport {
    let ok: Vec<&CaseMetrics> = cases.iter().filter(|c| c.ok).collect();
    let means = Means {
        silhouette_iou: mean(ok.iter().map(|c| c.silhouette_iou)).unwrap_or(0.0),
        source_silhouette_iou: mean(ok.iter().map(|c| c.source_silhouette_iou)).unwrap_or(0.0),
        preservation_iou: mean(ok.iter().map(|c| c.preservation_iou)).unwrap_or(0.0),
        chamfer: mean(ok.iter().filter_map(|c| c.chamfer)),
        final_energy: mean(ok.iter().map(|c| c.final_energy)).unwrap_or(0.0),
        texture_error: mean(ok.iter().filter_map(|c| c.texture_error)),
    };
    MetricsReport {
        completed: ok.len(),
        failed: cases.len() - ok.len(),
        means,
        cases,
    }
}

/// Case ids a run was started with, stored as `cases.json` in the run
/// directory.
pub fn write_case_list(run_dir: &Path, ids: &[String]) -> Result<()> {
    let p = run_dir.join("cases.json");
    let text = serde_json::to_string_pretty(ids).expect("ids serialize");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn read_metrics(path: &Path) -> Result<CaseMetrics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Collect `<id>/metrics.json` for every case listed in the run; a missing
/// or unreadable row becomes a failed row.
pub fn evaluate(run_dir: &Path) -> Result<MetricsReport> {
    let list = run_dir.join("cases.json");
    let text = std::fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
    let ids: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", list.display())))?;
    if ids.is_empty() {
        return Err(Error::invalid(format!("{} lists no cases", list.display())));
    }
    let rows = ids
        .iter()
        .map(|id| {
            let dir = run_dir.join(id);
            match read_metrics(&dir.join("metrics.json")) {
                Ok(m) => m,
                Err(e) => {
                    let why = std::fs::read_to_string(dir.join("error.txt"))
                        .unwrap_or_else(|_| e.to_string());
                    CaseMetrics::failed(id, why.trim_end())
                }
            }
        })
        .collect();
    Ok(aggregate(rows))
}

pub fn report_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}
