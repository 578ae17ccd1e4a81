//! Per-triangle atlas charts and the texel-to-surface map used for baking
//! and fusion.

use super::{TriMesh, Vec3};
use crate::error::{Error, Result};

/// Smallest chart cell in texels: one gutter texel on each side around a
/// right triangle with legs of two texels.
pub const MIN_CELL: usize = 4;
const GUTTER: usize = 1;

/// Square RGB atlas, row-major from the top row, with a validity flag per
/// texel.
#[derive(Debug, Clone, PartialEq)]
pub struct UvTexture {
    pub size: usize,
    pub colors: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl UvTexture {
    pub fn blank(size: usize) -> Self {
        Self {
            size,
            colors: vec![[0.0; 3]; size * size],
            valid: vec![false; size * size],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexelSample {
    pub triangle: usize,
    pub bary: [f64; 3],
}

fn pack(sides: &[usize], size: usize) -> Option<Vec<(usize, usize)>> {
    let (mut x, mut y, mut shelf) = (0usize, 0usize, 0usize);
    let mut out = Vec::with_capacity(sides.len());
    for &s in sides {
        if s > size {
            return None;
        }
        if x + s > size {
            y += shelf;
            x = 0;
            shelf = 0;
        }
        if y + s > size {
            return None;
        }
        out.push((x, y));
        x += s;
        shelf = shelf.max(s);
    }
    Some(out)
}

fn sides_for(areas: &[f64], k: f64) -> Vec<usize> {
    areas
        .iter()
        .map(|a| ((k * a.sqrt()).floor() as usize).max(MIN_CELL))
        .collect()
}

/// Give every triangle its own square cell in an `size × size` atlas, with
/// cell sides proportional to the square root of the triangle area and
/// packed in triangle order. Vertices are untouched; `uvs` is replaced.
pub fn atlas_uv(mesh: &TriMesh, size: usize) -> Result<TriMesh> {
    mesh.validate()?;
    if mesh.is_empty() {
        return Err(Error::invalid("cannot chart an empty mesh"));
    }
    let areas: Vec<f64> = (0..mesh.triangles.len())
        .map(|f| mesh.face_area(f))
        .collect();
    let Some(mut placed) = pack(&sides_for(&areas, 0.0), size) else {
        return Err(Error::Capacity(format!(
            "{} triangles need cells of at least {MIN_CELL} texels; a {size}x{size} atlas is too small",
            areas.len()
        )));
    };
    let mut sides = sides_for(&areas, 0.0);
    let max_area = areas.iter().cloned().fold(0.0, f64::max);
    if max_area > 0.0 {
        let (mut lo, mut hi) = (0.0, size as f64 / max_area.sqrt() + 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let s = sides_for(&areas, mid);
            match pack(&s, size) {
                Some(p) => {
                    lo = mid;
                    placed = p;
                    sides = s;
                }
                None => hi = mid,
            }
        }
    }
    let a = size as f64;
    let mut out = mesh.clone();
    out.uvs = Vec::with_capacity(3 * mesh.triangles.len());
    for (&(x0, y0), &s) in placed.iter().zip(&sides) {
        let (lo_x, lo_y) = ((x0 + GUTTER) as f64, (y0 + GUTTER) as f64);
        let leg = (s - 2 * GUTTER) as f64;
        for (x, y) in [(lo_x, lo_y), (lo_x + leg, lo_y), (lo_x, lo_y + leg)] {
            out.uvs.push([x / a, 1.0 - y / a]);
        }
    }
    Ok(out)
}

/// Owner triangle and barycentric coordinates of every texel centre that
/// falls inside a chart. Charts are rasterized from the UVs in triangle
/// order; a texel already claimed is left to its first owner.
#[derive(Debug, Clone)]
pub struct TexelMap {
    pub size: usize,
    pub owners: Vec<Option<TexelSample>>,
}

impl TexelMap {
    pub fn new(mesh: &TriMesh, size: usize) -> Result<Self> {
        if !mesh.has_uvs() {
            return Err(Error::invalid("mesh has no atlas coordinates"));
        }
        let mut owners = vec![None; size * size];
        for f in 0..mesh.triangles.len() {
            for (idx, bary) in chart_texels(mesh, f, size) {
                owners[idx].get_or_insert(TexelSample { triangle: f, bary });
            }
        }
        Ok(Self { size, owners })
    }

    pub fn point(&self, mesh: &TriMesh, idx: usize) -> Option<Vec3> {
        self.owners[idx].map(|s| mesh.point_at(s.triangle, s.bary))
    }
}

/// Texels whose centres lie inside chart `f`, with their barycentrics.
pub(crate) fn chart_texels(mesh: &TriMesh, f: usize, size: usize) -> Vec<(usize, [f64; 3])> {
    let a = size as f64;
    let p: [[f64; 2]; 3] = std::array::from_fn(|c| {
        let uv = mesh.uvs[3 * f + c];
        [uv[0] * a, (1.0 - uv[1]) * a]
    });
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    if det.abs() < 1e-12 {
        return Vec::new();
    }
    let xs = p.iter().map(|q| q[0]);
    let ys = p.iter().map(|q| q[1]);
    let x_lo = xs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let x_hi = (xs.fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(size);
    let y_lo = ys.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let y_hi = (ys.fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(size);
    let mut out = Vec::new();
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let b1 =
                ((cx - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (cy - p[0][1])) / det;
            let b2 =
                ((p[1][0] - p[0][0]) * (cy - p[0][1]) - (cx - p[0][0]) * (p[1][1] - p[0][1])) / det;
            let b0 = 1.0 - b1 - b2;
            const TOL: f64 = -1e-9;
            if b0 >= TOL && b1 >= TOL && b2 >= TOL {
                out.push((y * size + x, [b0, b1, b2]));
            }
        }
    }
    out
}

/// Texture whose valid texels hold `color(point, normal)` at their surface
/// sample.
pub fn bake_texture(
    mesh: &TriMesh,
    map: &TexelMap,
    color: impl Fn(Vec3, Vec3) -> [f64; 3],
) -> UvTexture {
    let mut tex = UvTexture::blank(map.size);
    for (idx, owner) in map.owners.iter().enumerate() {
        if let Some(s) = owner {
            let c = color(
                mesh.point_at(s.triangle, s.bary),
                mesh.interpolated_normal(s.triangle, s.bary),
            );
            tex.colors[idx] = c.map(|x| x.clamp(0.0, 1.0));
            tex.valid[idx] = true;
        }
    }
    tex
}
