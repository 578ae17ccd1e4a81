//! Surface extraction, per-triangle UV atlases, an orthographic software
//! rasterizer, multi-view texture fusion and OBJ/MTL/PPM export.

mod atlas;
mod fusion;
mod io;
mod mc;
mod render;

pub use atlas::{atlas_uv, bake_texture, TexelMap, TexelSample, UvTexture, MIN_CELL};
pub use fusion::{fuse_texture, view_weight, DEFAULT_EXPONENT, DEPTH_BIAS};
pub use io::{
    decode_ppm, encode_ppm, export_obj, parse_obj, read_obj, read_ppm, write_obj, write_ppm,
};
pub use mc::{marching_cubes, DEFAULT_ISO};
pub use render::{
    auxiliary_cameras, rasterize, render_grid, render_view, Camera, Fragments, Paint, Shading,
    ViewImage, BACKGROUND,
};

use std::collections::HashSet;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector, or `None` for (near) zero input.
pub(crate) fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 1e-300 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

/// Triangle mesh in normalized `[0,1]³` coordinates.
///
/// `uvs` is either empty or holds one coordinate per triangle corner
/// (corner `c` of triangle `f` at `3 * f + c`), since every triangle owns
/// its own atlas chart.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn has_uvs(&self) -> bool {
        !self.triangles.is_empty() && self.uvs.len() == 3 * self.triangles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.normals.len() != self.vertices.len() {
            return Err(Error::invalid("one normal per vertex is required"));
        }
        if !self.uvs.is_empty() && self.uvs.len() != 3 * self.triangles.len() {
            return Err(Error::invalid(
                "uvs must hold one entry per triangle corner",
            ));
        }
        for (f, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::invalid(format!(
                    "triangle {f} has an out-of-range index"
                )));
            }
        }
        Ok(())
    }

    pub fn corners(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal (twice the area vector).
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.corners(f);
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * norm(self.face_cross(f))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume; positive when faces wind outward.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|f| {
                let [a, b, c] = self.corners(f);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// `V − E + F` over the referenced vertices and undirected edges.
    pub fn euler_characteristic(&self) -> i64 {
        let mut verts = HashSet::new();
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for c in 0..3 {
                let (a, b) = (t[c], t[(c + 1) % 3]);
                verts.insert(a);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        verts.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// True when every undirected edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        let mut count = std::collections::HashMap::new();
        for t in &self.triangles {
            for c in 0..3 {
                let (a, b) = (t[c], t[(c + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        count.values().all(|&n| n == 2)
    }

    /// Normal at barycentric position `bary` of face `f`, interpolated from
    /// the vertex normals (face normal as fallback).
    pub fn interpolated_normal(&self, f: usize, bary: [f64; 3]) -> Vec3 {
        let t = self.triangles[f];
        let mut n = [0.0; 3];
        for c in 0..3 {
            n = add(n, scale(self.normals[t[c]], bary[c]));
        }
        normalize(n)
            .or_else(|| normalize(self.face_cross(f)))
            .unwrap_or([0.0, 0.0, 1.0])
    }

    pub fn point_at(&self, f: usize, bary: [f64; 3]) -> Vec3 {
        let [a, b, c] = self.corners(f);
        add(add(scale(a, bary[0]), scale(b, bary[1])), scale(c, bary[2]))
    }
}

/// Symmetric mean nearest-neighbour distance between two point sets.
/// Two empty sets are at distance 0; one empty set gives infinity.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    0.5 * (mean_nearest(a, b) + mean_nearest(b, a))
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    // bucket `to` in a uniform grid and search growing shells
    let cells = ((to.len() as f64).cbrt().ceil() as usize).clamp(1, 64);
    let (lo, hi) = bounds(from.iter().chain(to));
    let ext = sub(hi, lo).map(|e| e.max(1e-12));
    let cell_of = |p: Vec3| -> [usize; 3] {
        std::array::from_fn(|a| (((p[a] - lo[a]) / ext[a] * cells as f64) as usize).min(cells - 1))
    };
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cells.pow(3)];
    for (i, &p) in to.iter().enumerate() {
        let c = cell_of(p);
        buckets[(c[0] * cells + c[1]) * cells + c[2]].push(i);
    }
    let min_cell = ext
        .iter()
        .fold(f64::INFINITY, |m, &e| m.min(e / cells as f64));
    let mut total = 0.0;
    for &p in from {
        let c = cell_of(p);
        let mut best = f64::INFINITY;
        for shell in 0..=cells {
            let s = shell as isize;
            for di in -s..=s {
                for dj in -s..=s {
                    for dk in -s..=s {
                        if di.abs().max(dj.abs()).max(dk.abs()) != s {
                            continue;
                        }
                        let q = [c[0] as isize + di, c[1] as isize + dj, c[2] as isize + dk];
                        if q.iter().any(|&x| x < 0 || x >= cells as isize) {
                            continue;
                        }
                        let b = (q[0] as usize * cells + q[1] as usize) * cells + q[2] as usize;
                        for &i in &buckets[b] {
                            best = best.min(norm(sub(p, to[i])));
                        }
                    }
                }
            }
            // every unvisited point lies at least `shell * min_cell` away
            if best <= shell as f64 * min_cell {
                break;
            }
        }
        total += best;
    }
    total / from.len() as f64
}

fn bounds<'a>(pts: impl Iterator<Item = &'a Vec3>) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}
