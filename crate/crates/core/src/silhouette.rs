//! Front-view occupancy silhouettes, their BCE energy against a target mask,
//! and the analytic gradient of that energy with respect to latent logits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{index, logistic, StructureLatent};

pub const DEFAULT_KAPPA: f64 = 0.25;
/// Floor inside the BCE logarithms.
pub const BCE_EPS: f64 = 1e-8;

/// `S[i, j] = 1 - exp(-κ Σ_k p[i, j, k])`, stored row-major over `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Silhouette {
    res: usize,
    raster: Vec<f64>,
    kappa: f64,
}

impl Silhouette {
    pub fn res(&self) -> usize {
        self.res
    }

    pub fn raster(&self) -> &[f64] {
        &self.raster
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Pixels with `S >= threshold` as 0/1.
    pub fn binarize(&self, threshold: f64) -> Vec<f64> {
        self.raster
            .iter()
            .map(|&s| if s >= threshold { 1.0 } else { 0.0 })
            .collect()
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::invalid(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    Ok(())
}

/// Per-pixel occupancy sums along the depth axis.
fn column_sums(latent: &StructureLatent) -> Vec<f64> {
    let r = latent.res();
    latent
        .logits()
        .chunks(r)
        .map(|col| col.iter().map(|&u| logistic(u)).sum())
        .collect()
}

pub fn render_silhouette(latent: &StructureLatent, kappa: f64) -> Result<Silhouette> {
    check_kappa(kappa)?;
    Ok(Silhouette {
        res: latent.res(),
        raster: column_sums(latent)
            .into_iter()
            .map(|s| 1.0 - (-kappa * s).exp())
            .collect(),
        kappa,
    })
}

/// Mean binary cross-entropy between `S` and a target raster in `[0,1]`.
pub fn bce_energy(s: &Silhouette, target: &[f64]) -> Result<f64> {
    if target.len() != s.raster.len() {
        return Err(Error::invalid(format!(
            "target silhouette has {} pixels, rendered has {}",
            target.len(),
            s.raster.len()
        )));
    }
    let n = target.len() as f64;
    Ok(s.raster
        .iter()
        .zip(target)
        .map(|(&si, &m)| -(m * (si + BCE_EPS).ln() + (1.0 - m) * (1.0 - si + BCE_EPS).ln()))
        .sum::<f64>()
        / n)
}

/// `∇_logits E_sil`: per voxel `∂E/∂S[i,j] · κ e^{-κΣ} · p (1 - p)`.
pub fn energy_gradient(latent: &StructureLatent, target: &[f64], kappa: f64) -> Result<Vec<f64>> {
    check_kappa(kappa)?;
    let r = latent.res();
    if target.len() != r * r {
        return Err(Error::invalid(format!(
            "target silhouette has {} pixels, expected {}",
            target.len(),
            r * r
        )));
    }
    let n = (r * r) as f64;
    let mut grad = vec![0.0; latent.logits().len()];
    for (pix, (col, &m)) in latent.logits().chunks(r).zip(target).enumerate() {
        let sum: f64 = col.iter().map(|&u| logistic(u)).sum();
        let e = (-kappa * sum).exp();
        let s = 1.0 - e;
        let d_s = (-m / (s + BCE_EPS) + (1.0 - m) / (1.0 - s + BCE_EPS)) / n;
        let d_sum = d_s * kappa * e;
        let base = pix * r;
        for (k, &u) in col.iter().enumerate() {
            let p = logistic(u);
            grad[base + k] = d_sum * p * (1.0 - p);
        }
    }
    Ok(grad)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale `g` to the ℓ2 norm of `reference`. Near-zero `g` maps to zero;
/// a zero reference leaves `g` unchanged.
pub fn norm_match(g: &[f64], reference: &[f64]) -> Vec<f64> {
    let gn = l2_norm(g);
    if gn < 1e-12 {
        return vec![0.0; g.len()];
    }
    let rn = l2_norm(reference);
    if rn == 0.0 {
        return g.to_vec();
    }
    let s = rn / gn;
    g.iter().map(|x| x * s).collect()
}

/// Front-view binary silhouette of an occupancy grid: pixel set iff any
/// voxel along the ray is at least `threshold`.
pub fn occupancy_silhouette(values: &[f64], res: usize, threshold: f64) -> Vec<f64> {
    (0..res * res)
        .map(|pix| {
            let (i, j) = (pix / res, pix % res);
            let hit = (0..res).any(|k| values[index(res, i, j, k)] >= threshold);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Intersection over union of two 0/1 rasters (1 when both are empty).
pub fn iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binary 16-bit PGM (`P5`, maxval 65535) of a `[0,1]` raster.
pub fn write_pgm(path: &Path, raster: &[f64], width: usize, height: usize) -> Result<()> {
    std::fs::write(path, encode_pgm(raster, width, height)).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(raster: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in raster.iter().take(width * height) {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |m: &str| Error::Parse(format!("pgm: {m}"));
    // header: four whitespace-separated tokens followed by one whitespace byte
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 65535 {
        return Err(bad("only 16-bit PGM is supported"));
    }
    let body = bytes.get(pos..).ok_or_else(|| bad("missing pixels"))?;
    if body.len() != w * h * 2 {
        return Err(bad("pixel count mismatch"));
    }
    let vals = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok((w, h, vals))
}
