//! Masked repainting of per-voxel appearance features.
//!
//! Inside the feathered mask the conditional appearance flow is integrated
//! from noise; outside it the forward-diffused source is replayed, so the
//! last blend (at `t = 0`) lands exactly on the source features.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{cfg_velocity, Condition, TimeGrid, VelocityModel};
use crate::grid::{downsample_mask, feather, EditMask};
use crate::rng;

/// Dense per-voxel feature field with an activity flag per voxel.
/// Features are stored voxel-major: feature `f` of voxel `v` is `features[v * F + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlatField {
    res: usize,
    feat_dim: usize,
    features: Vec<f64>,
    activity: Vec<bool>,
}

impl SlatField {
    pub fn new(
        res: usize,
        feat_dim: usize,
        features: Vec<f64>,
        activity: Vec<bool>,
    ) -> Result<Self> {
        let n = res * res * res;
        if res == 0 || feat_dim == 0 {
            return Err(Error::invalid(
                "resolution and feature dimension must be positive",
            ));
        }
        if features.len() != n * feat_dim || activity.len() != n {
            return Err(Error::invalid(format!(
                "slat field of {res}^3 x {feat_dim} needs {} features and {n} flags, got {} and {}",
                n * feat_dim,
                features.len(),
                activity.len()
            )));
        }
        Ok(Self {
            res,
            feat_dim,
            features,
            activity,
        })
    }

    pub fn zeros(res: usize, feat_dim: usize, activity: Vec<bool>) -> Result<Self> {
        Self::new(res, feat_dim, vec![0.0; res.pow(3) * feat_dim], activity)
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn activity(&self) -> &[bool] {
        &self.activity
    }

    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.features[v * self.feat_dim..(v + 1) * self.feat_dim]
    }

    /// Copy with inactive voxels zeroed.
    pub fn canonical(&self) -> SlatField {
        let mut out = self.clone();
        for (v, &a) in self.activity.iter().enumerate() {
            if !a {
                out.features[v * self.feat_dim..(v + 1) * self.feat_dim].fill(0.0);
            }
        }
        out
    }

    /// Display color of a voxel: the first three channels clamped to [0,1].
    /// Inactive voxels decode to black.
    pub fn color(&self, v: usize) -> [f64; 3] {
        if !self.activity[v] {
            return [0.0; 3];
        }
        let f = self.voxel(v);
        let c = |i: usize| f.get(i).copied().unwrap_or(0.0).clamp(0.0, 1.0);
        [c(0), c(1), c(2)]
    }

    /// Per-element weights expanding a voxel mask over the feature channels.
    pub fn expand_mask(&self, mask: &EditMask) -> Result<Vec<f64>> {
        if mask.res() != self.res {
            return Err(Error::invalid(format!(
                "mask resolution {} differs from feature resolution {}",
                mask.res(),
                self.res
            )));
        }
        Ok(mask
            .weights()
            .iter()
            .flat_map(|&w| std::iter::repeat_n(w, self.feat_dim))
            .collect())
    }

    pub fn to_dump(&self) -> String {
        let mut s = format!("SLATF {} {}\n", self.res, self.feat_dim);
        for v in 0..self.activity.len() {
            let row: Vec<String> = self.voxel(v).iter().map(|x| format!("{x}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        for row in self.activity.chunks(self.res) {
            let row: Vec<&str> = row.iter().map(|&a| if a { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        if tokens.next() != Some("SLATF") {
            return Err(Error::Parse("missing SLATF header".into()));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse("bad SLATF header".into()))
        };
        let (res, feat_dim) = (dim()?, dim()?);
        let rest: Vec<&str> = text.split_whitespace().skip(3).collect();
        let n = res.pow(3);
        if rest.len() != n * feat_dim + n {
            return Err(Error::Parse(format!(
                "expected {} values after SLATF header, found {}",
                n * feat_dim + n,
                rest.len()
            )));
        }
        let features = rest[..n * feat_dim]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad feature value {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let activity = rest[n * feat_dim..]
            .iter()
            .map(|t| match *t {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse(format!("bad activity flag {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(res, feat_dim, features, activity)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_dump()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_dump(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepaintConfig {
    pub steps: usize,
    /// Feathering width in voxels.
    pub sigma_b: f64,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for RepaintConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            sigma_b: 1.0,
            cfg_scale: 3.0,
            seed: 0,
        }
    }
}

impl RepaintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("repaint needs at least one step"));
        }
        if !(self.sigma_b > 0.0) || !(self.cfg_scale >= 0.0) {
            return Err(Error::invalid(
                "sigma_b must be positive and cfg_scale non-negative",
            ));
        }
        Ok(())
    }
}

/// Feathered per-feature mask: the mesh mask is pooled to the feature
/// resolution, blurred, and then limited to active voxels.
pub fn build_feature_mask(
    mesh_mask: &EditMask,
    activity: &[bool],
    sigma_b: f64,
) -> Result<EditMask> {
    let res = (activity.len() as f64).cbrt().round() as usize;
    if res.pow(3) != activity.len() {
        return Err(Error::invalid("activity field is not a cube"));
    }
    let coarse = downsample_mask(mesh_mask, res, 0)?;
    Ok(feather(&coarse, sigma_b)?.restrict(activity))
}

/// `m·a + (1 − m)·b`, returning a branch verbatim at the mask extremes.
fn blend(m: f64, a: f64, b: f64) -> f64 {
    if m == 0.0 {
        b
    } else if m == 1.0 {
        a
    } else {
        m * a + (1.0 - m) * b
    }
}

/// One repaint step from `t_k` to `t_prev = t_{k−1}`:
///
/// ```text
/// z_{k−1} = M̃ ⊙ [z_k + Δt·v(z_k, t_k | c)] + (1 − M̃) ⊙ [(1 − t_{k−1}) z_src + t_{k−1} ε]
/// ```
///
/// `mask` holds one weight per element of `z_k`.
pub fn repaint_step(
    z_k: &[f64],
    t_k: f64,
    t_prev: f64,
    mask: &[f64],
    z_src: &[f64],
    model: &VelocityModel,
    cond: &Condition,
    cfg_scale: f64,
    seed_k: u64,
) -> Result<Vec<f64>> {
    let n = z_k.len();
    if mask.len() != n || z_src.len() != n {
        return Err(Error::invalid(format!(
            "repaint inputs disagree: state {n}, mask {}, source {}",
            mask.len(),
            z_src.len()
        )));
    }
    if !(t_prev >= 0.0 && t_prev < t_k) {
        return Err(Error::invalid(format!(
            "bad repaint interval {t_k} -> {t_prev}"
        )));
    }
    let dt = t_prev - t_k;
    let v = if mask.iter().any(|&m| m != 0.0) {
        cfg_velocity(model, z_k, t_k, cond, cfg_scale)?
    } else {
        vec![0.0; n]
    };
    let eps = rng::noise(seed_k, n);
    Ok((0..n)
        .map(|d| {
            let generated = z_k[d] + dt * v[d];
            let replay = (1.0 - t_prev) * z_src[d] + t_prev * eps[d];
            blend(mask[d], generated, replay)
        })
        .collect())
}

/// Full repaint loop from pure noise at `t = 1` down to `t = 0`. The result
/// keeps the activity of `z_src`.
pub fn repaint_run(
    z_src: &SlatField,
    mask: &EditMask,
    model: &VelocityModel,
    cond: &Condition,
    cfg: &RepaintConfig,
) -> Result<SlatField> {
    cfg.validate()?;
    let weights = z_src.expand_mask(mask)?;
    if model.dim() != weights.len() {
        return Err(Error::invalid(format!(
            "appearance model dimension {} does not match feature field size {}",
            model.dim(),
            weights.len()
        )));
    }
    let grid = TimeGrid::new(cfg.steps)?;
    let mut z = rng::noise(rng::derive(cfg.seed, &[u64::MAX]), weights.len());
    for (k, t, t_prev) in grid.intervals() {
        let seed_k = rng::derive(cfg.seed, &[k as u64]);
        z = repaint_step(
            &z,
            t,
            t_prev,
            &weights,
            z_src.features(),
            model,
            cond,
            cfg.cfg_scale,
            seed_k,
        )?;
    }
    SlatField::new(z_src.res(), z_src.feat_dim(), z, z_src.activity().to_vec())
}
