//! Dense voxel fields: occupancy grids, structure latents and edit masks.
//!
//! All fields share one memory order: `index(i, j, k) = (i * R + j) * R + k`,
//! with `k` running along the front camera ray (depth).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Logit magnitude `encode` assigns to exact 0/1 occupancies.
pub const DEFAULT_LOGIT_MARGIN: f64 = 8.0;

#[inline]
pub fn index(res: usize, i: usize, j: usize, k: usize) -> usize {
    (i * res + j) * res + k
}

#[inline]
pub fn unindex(res: usize, v: usize) -> (usize, usize, usize) {
    (v / (res * res), (v / res) % res, v % res)
}

/// Center of voxel `(i, j, k)` in normalized `[0,1]^3` coordinates.
#[inline]
pub fn voxel_center(res: usize, i: usize, j: usize, k: usize) -> [f64; 3] {
    let r = res as f64;
    [
        (i as f64 + 0.5) / r,
        (j as f64 + 0.5) / r,
        (k as f64 + 0.5) / r,
    ]
}

#[inline]
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_len(res: usize, len: usize) -> Result<()> {
    if res == 0 || len != res * res * res {
        return Err(Error::invalid(format!(
            "field of length {len} does not match resolution {res}"
        )));
    }
    Ok(())
}

/// Scalar field over an `R^3` grid, usually occupancy probability.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    res: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(res: usize, values: Vec<f64>) -> Result<Self> {
        check_len(res, values.len())?;
        Ok(Self { res, values })
    }

    pub fn zeros(res: usize) -> Self {
        Self {
            res,
            values: vec![0.0; res * res * res],
        }
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[index(self.res, i, j, k)]
    }

    /// Number of voxels at or above `threshold`.
    pub fn count_above(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }

    /// Occupancy probabilities resampled to another resolution.
    pub fn resample(&self, res: usize) -> VoxelGrid {
        VoxelGrid {
            res,
            values: resample_trilinear(&self.values, self.res, res),
        }
    }

    pub fn to_dump(&self) -> String {
        dump_field("VOXGRID", self.res, &self.values)
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let (res, values) = parse_field("VOXGRID", text)?;
        Self::new(res, values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_dump()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_dump(&text)
    }
}

/// Occupancy logits standing in for a VAE-encoded voxel structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureLatent {
    res: usize,
    logits: Vec<f64>,
}

impl StructureLatent {
    pub fn new(res: usize, logits: Vec<f64>) -> Result<Self> {
        check_len(res, logits.len())?;
        Ok(Self { res, logits })
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn into_logits(self) -> Vec<f64> {
        self.logits
    }

    /// Downsample an occupancy grid to `latent_res` and encode it.
    pub fn from_grid(grid: &VoxelGrid, latent_res: usize, margin: f64) -> StructureLatent {
        encode(&grid.resample(latent_res), margin)
    }

    /// Decode and upsample back to `res` for surface extraction.
    pub fn to_grid(&self, res: usize) -> VoxelGrid {
        decode(self).resample(res)
    }
}

/// Map occupancy probabilities to logits; exact 0/1 land on `∓margin`.
pub fn encode(grid: &VoxelGrid, margin: f64) -> StructureLatent {
    let eps = logistic(-margin.abs());
    StructureLatent {
        res: grid.res,
        logits: grid
            .values
            .iter()
            .map(|&p| logit(p.clamp(eps, 1.0 - eps)))
            .collect(),
    }
}

pub fn decode(latent: &StructureLatent) -> VoxelGrid {
    VoxelGrid {
        res: latent.res,
        values: latent.logits.iter().map(|&u| logistic(u)).collect(),
    }
}

/// Weights in `[0,1]` selecting the editable region.
#[derive(Debug, Clone, PartialEq)]
pub struct EditMask {
    res: usize,
    weights: Vec<f64>,
}

impl EditMask {
    pub fn new(res: usize, weights: Vec<f64>) -> Result<Self> {
        check_len(res, weights.len())?;
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::invalid(format!("mask weight {w} outside [0,1]")));
        }
        Ok(Self { res, weights })
    }

    pub fn zeros(res: usize) -> Self {
        Self {
            res,
            weights: vec![0.0; res * res * res],
        }
    }

    pub fn ones(res: usize) -> Self {
        Self {
            res,
            weights: vec![1.0; res * res * res],
        }
    }

    /// Binary mask from a predicate on voxel centers.
    pub fn from_fn(res: usize, mut f: impl FnMut([f64; 3]) -> bool) -> Self {
        let mut weights = vec![0.0; res * res * res];
        for (v, w) in weights.iter_mut().enumerate() {
            let (i, j, k) = unindex(res, v);
            if f(voxel_center(res, i, j, k)) {
                *w = 1.0;
            }
        }
        Self { res, weights }
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_binary(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0 || w == 1.0)
    }

    /// Number of voxels with non-zero weight.
    pub fn support(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Element-wise product with another field (e.g. restricting to active voxels).
    pub fn restrict(&self, keep: &[bool]) -> EditMask {
        EditMask {
            res: self.res,
            weights: self
                .weights
                .iter()
                .zip(keep)
                .map(|(&w, &a)| if a { w } else { 0.0 })
                .collect(),
        }
    }

    /// Trilinear lookup at a normalized position.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        sample_trilinear(&self.weights, self.res, p)
    }

    pub fn to_grid(&self) -> VoxelGrid {
        VoxelGrid {
            res: self.res,
            values: self.weights.clone(),
        }
    }

    pub fn from_grid(grid: &VoxelGrid) -> Result<Self> {
        Self::new(grid.res, grid.values.clone())
    }
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders, result clamped to `[0,1]`.
pub fn feather(mask: &EditMask, sigma_b: f64) -> Result<EditMask> {
    if !(sigma_b > 0.0) || !sigma_b.is_finite() {
        return Err(Error::invalid(format!(
            "feather sigma must be positive, got {sigma_b}"
        )));
    }
    let res = mask.res;
    let kernel = gaussian_kernel(sigma_b);
    let r = (kernel.len() / 2) as isize;
    let mut field = mask.weights.clone();
    let mut out = vec![0.0; field.len()];
    let strides = [res * res, res, 1];
    for &stride in &strides {
        for (v, o) in out.iter_mut().enumerate() {
            let coord = (v / stride) % res;
            let base = v - coord * stride;
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let c = (coord as isize + t as isize - r).clamp(0, res as isize - 1) as usize;
                acc += w * field[base + c * stride];
            }
            *o = acc;
        }
        std::mem::swap(&mut field, &mut out);
    }
    for w in &mut field {
        *w = w.clamp(0.0, 1.0);
    }
    Ok(EditMask {
        res,
        weights: field,
    })
}

/// Max-pool a fine mask to `latent_res`, then grow it by `dilation` voxels
/// in the 6-neighbourhood.
pub fn downsample_mask(mask: &EditMask, latent_res: usize, dilation: usize) -> Result<EditMask> {
    let fine = mask.res;
    if latent_res == 0 || fine < latent_res || !fine.is_multiple_of(latent_res) {
        return Err(Error::invalid(format!(
            "mask resolution {fine} is not a multiple of latent resolution {latent_res}"
        )));
    }
    let f = fine / latent_res;
    let mut coarse = vec![0.0; latent_res.pow(3)];
    for (v, &w) in mask.weights.iter().enumerate() {
        if w > 0.0 {
            let (i, j, k) = unindex(fine, v);
            coarse[index(latent_res, i / f, j / f, k / f)] = 1.0;
        }
    }
    for _ in 0..dilation {
        coarse = dilate6(&coarse, latent_res);
    }
    Ok(EditMask {
        res: latent_res,
        weights: coarse,
    })
}

fn dilate6(field: &[f64], res: usize) -> Vec<f64> {
    let mut out = field.to_vec();
    for (v, &w) in field.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (i, j, k) = unindex(res, v);
        let c = [i, j, k];
        for axis in 0..3 {
            for step in [-1isize, 1] {
                let n = c[axis] as isize + step;
                if n < 0 || n >= res as isize {
                    continue;
                }
                let mut nc = c;
                nc[axis] = n as usize;
                out[index(res, nc[0], nc[1], nc[2])] = 1.0;
            }
        }
    }
    out
}

fn axis_weights(u: f64, res: usize) -> (usize, usize, f64) {
    let u = u.clamp(0.0, (res - 1) as f64);
    let lo = (u.floor() as usize).min(res - 1);
    let hi = (lo + 1).min(res - 1);
    (lo, hi, u - lo as f64)
}

/// Trilinear interpolation of a cell-centered field at normalized `p`.
pub fn sample_trilinear(field: &[f64], res: usize, p: [f64; 3]) -> f64 {
    let r = res as f64;
    let (i0, i1, fi) = axis_weights(p[0] * r - 0.5, res);
    let (j0, j1, fj) = axis_weights(p[1] * r - 0.5, res);
    let (k0, k1, fk) = axis_weights(p[2] * r - 0.5, res);
    let at = |i, j, k| field[index(res, i, j, k)];
    let c00 = at(i0, j0, k0) * (1.0 - fk) + at(i0, j0, k1) * fk;
    let c01 = at(i0, j1, k0) * (1.0 - fk) + at(i0, j1, k1) * fk;
    let c10 = at(i1, j0, k0) * (1.0 - fk) + at(i1, j0, k1) * fk;
    let c11 = at(i1, j1, k0) * (1.0 - fk) + at(i1, j1, k1) * fk;
    let c0 = c00 * (1.0 - fj) + c01 * fj;
    let c1 = c10 * (1.0 - fj) + c11 * fj;
    c0 * (1.0 - fi) + c1 * fi
}

/// Cell-centered trilinear resampling. Halving the resolution reduces to a
/// 2x2x2 box average.
pub fn resample_trilinear(field: &[f64], res_in: usize, res_out: usize) -> Vec<f64> {
    if res_in == res_out {
        return field.to_vec();
    }
    let mut out = vec![0.0; res_out.pow(3)];
    for (v, o) in out.iter_mut().enumerate() {
        let (i, j, k) = unindex(res_out, v);
        *o = sample_trilinear(field, res_in, voxel_center(res_out, i, j, k));
    }
    out
}

pub(crate) fn dump_field(tag: &str, res: usize, values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 8 + 32);
    let _ = writeln!(s, "{tag} {res}");
    for row in values.chunks(res) {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

fn parse_field(tag: &str, text: &str) -> Result<(usize, Vec<f64>)> {
    let mut tokens = text.split_ascii_whitespace();
    if tokens.next() != Some(tag) {
        return Err(Error::Parse(format!("missing {tag} header")));
    }
    let res: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad {tag} resolution")))?;
    let values = tokens
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Parse(format!("{t}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != res * res * res {
        return Err(Error::Parse(format!(
            "{tag} {res} expects {} values, found {}",
            res * res * res,
            values.len()
        )));
    }
    Ok((res, values))
}
