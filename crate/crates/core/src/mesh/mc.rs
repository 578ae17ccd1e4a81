//! Marching cubes over voxel-centre samples.
//!
//! Rather than a fixed case table, each cube's surface is traced from its
//! faces: every face contributes oriented segments between its edge
//! crossings, and the segments chain into closed loops that are then
//! triangulated. Ambiguous faces are split with the asymptotic decider, a
//! rule that only reads the face's four values, so the two cubes sharing a
//! face always agree and the surface has no cracks. The grid is padded with
//! a layer of zeros so surfaces touching the border still close.

use std::collections::HashMap;

use super::{add, cross, normalize, scale, sub, TriMesh, Vec3};
use crate::grid::VoxelGrid;

pub const DEFAULT_ISO: f64 = 0.5;

const CORNER: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Faces as corner cycles, counter-clockwise seen from outside the cube.
fn face_cycles() -> [[usize; 4]; 6] {
    let mut faces = [[0; 4]; 6];
    for axis in 0..3 {
        let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let at = |du: usize, dw: usize| -> usize {
                let mut c = 0;
                if side == 1 {
                    c |= 1 << axis;
                }
                if du == 1 {
                    c |= 1 << u;
                }
                if dw == 1 {
                    c |= 1 << w;
                }
                c
            };
            let ccw = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)];
            faces[axis * 2 + side] = if side == 1 {
                ccw
            } else {
                [ccw[3], ccw[2], ccw[1], ccw[0]]
            };
        }
    }
    faces
}

struct Padded<'a> {
    grid: &'a VoxelGrid,
    res: usize,
}

impl Padded<'_> {
    /// Value at padded point `p` (grid point `p − 1`); zero outside.
    fn value(&self, p: [isize; 3]) -> f64 {
        let r = self.res as isize;
        if p.iter().any(|&x| x < 1 || x > r) {
            return 0.0;
        }
        self.grid
            .get(p[0] as usize - 1, p[1] as usize - 1, p[2] as usize - 1)
    }

    fn position(&self, p: [isize; 3]) -> Vec3 {
        let r = self.res as f64;
        std::array::from_fn(|a| (p[a] as f64 - 0.5) / r)
    }

    fn gradient(&self, p: [isize; 3]) -> Vec3 {
        let h = 1.0 / self.res as f64;
        std::array::from_fn(|a| {
            let mut hi = p;
            let mut lo = p;
            hi[a] += 1;
            lo[a] -= 1;
            (self.value(hi) - self.value(lo)) / (2.0 * h)
        })
    }
}

/// Iso-surface of `grid` at level `iso` (inside means `value >= iso`).
/// Triangles wind so that their normals point toward lower values; vertex
/// normals come from the interpolated field gradient.
pub fn marching_cubes(grid: &VoxelGrid, iso: f64) -> TriMesh {
    let res = grid.res();
    let pad = Padded { grid, res };
    let faces = face_cycles();
    let n_pts = res as isize + 2;
    let mut mesh = TriMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();

    let point_id = |p: [isize; 3]| -> usize { ((p[0] * n_pts + p[1]) * n_pts + p[2]) as usize };

    for ci in 0..n_pts - 1 {
        for cj in 0..n_pts - 1 {
            for ck in 0..n_pts - 1 {
                let base = [ci, cj, ck];
                let pts: [[isize; 3]; 8] = std::array::from_fn(|c| {
                    std::array::from_fn(|a| base[a] + CORNER[c][a] as isize)
                });
                let vals: [f64; 8] = std::array::from_fn(|c| pad.value(pts[c]));
                let inside: [bool; 8] = std::array::from_fn(|c| vals[c] >= iso);
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }
                // next[e] = successor of crossing on local edge (a, b), keyed by corner pair
                let mut next: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
                for cyc in &faces {
                    let f: [bool; 4] = std::array::from_fn(|k| inside[cyc[k]]);
                    let edge = |k: usize| -> (usize, usize) {
                        let (a, b) = (cyc[k], cyc[(k + 1) % 4]);
                        (a.min(b), a.max(b))
                    };
                    let crossings = (0..4).filter(|&k| f[k] != f[(k + 1) % 4]).count();
                    match crossings {
                        0 => {}
                        2 => {
                            let out = (0..4).find(|&k| f[k] && !f[(k + 1) % 4]).unwrap();
                            let inn = (0..4).find(|&k| !f[k] && f[(k + 1) % 4]).unwrap();
                            next.insert(edge(out), edge(inn));
                        }
                        _ => {
                            let v: [f64; 4] = std::array::from_fn(|k| vals[cyc[k]]);
                            let denom = v[0] + v[2] - v[1] - v[3];
                            let saddle = (v[0] * v[2] - v[1] * v[3]) / denom;
                            let connected = saddle >= iso;
                            for k in 0..4 {
                                let prev = (k + 3) % 4;
                                if f[k] && !connected {
                                    next.insert(edge(k), edge(prev));
                                } else if !f[k] && connected {
                                    next.insert(edge(prev), edge(k));
                                }
                            }
                        }
                    }
                }

                let mut vertex_of = |e: (usize, usize), mesh: &mut TriMesh| -> usize {
                    let (a, b) = e;
                    let axis = (a ^ b).trailing_zeros() as usize;
                    let key = (point_id(pts[a]), axis);
                    *edge_vertex.entry(key).or_insert_with(|| {
                        let t = ((iso - vals[a]) / (vals[b] - vals[a])).clamp(0.0, 1.0);
                        let (pa, pb) = (pad.position(pts[a]), pad.position(pts[b]));
                        let (ga, gb) = (pad.gradient(pts[a]), pad.gradient(pts[b]));
                        mesh.vertices.push(add(pa, scale(sub(pb, pa), t)));
                        mesh.normals.push(
                            normalize(scale(add(ga, scale(sub(gb, ga), t)), -1.0))
                                .unwrap_or([0.0; 3]),
                        );
                        mesh.vertices.len() - 1
                    })
                };

                let mut keys: Vec<(usize, usize)> = next.keys().copied().collect();
                keys.sort_unstable();
                let mut used = vec![false; keys.len()];
                for start in 0..keys.len() {
                    if used[start] {
                        continue;
                    }
                    let mut lp = Vec::new();
                    let mut e = keys[start];
                    loop {
                        let idx = keys.binary_search(&e).unwrap();
                        if used[idx] {
                            break;
                        }
                        used[idx] = true;
                        lp.push(vertex_of(e, &mut mesh));
                        e = next[&e];
                    }
                    emit_loop(&mut mesh, &lp);
                }
            }
        }
    }
    fix_normals(&mut mesh);
    mesh
}

/// Triangulate one closed loop. Loops are traced with the inside on their
/// left, so the fan order is reversed to make normals face outward.
fn emit_loop(mesh: &mut TriMesh, lp: &[usize]) {
    match lp.len() {
        0..=2 => {}
        3 => mesh.triangles.push([lp[0], lp[2], lp[1]]),
        4 => {
            mesh.triangles.push([lp[0], lp[2], lp[1]]);
            mesh.triangles.push([lp[0], lp[3], lp[2]]);
        }
        n => {
            let mut c = [0.0; 3];
            let mut nrm = [0.0; 3];
            for &v in lp {
                c = add(c, mesh.vertices[v]);
                nrm = add(nrm, mesh.normals[v]);
            }
            mesh.vertices.push(scale(c, 1.0 / n as f64));
            mesh.normals.push(normalize(nrm).unwrap_or([0.0; 3]));
            let center = mesh.vertices.len() - 1;
            for k in 0..n {
                mesh.triangles.push([center, lp[(k + 1) % n], lp[k]]);
            }
        }
    }
}

/// Replace degenerate vertex normals with the mean of adjacent face normals.
fn fix_normals(mesh: &mut TriMesh) {
    let bad: Vec<bool> = mesh
        .normals
        .iter()
        .map(|n| normalize(*n).is_none())
        .collect();
    if !bad.iter().any(|&b| b) {
        return;
    }
    let mut acc = vec![[0.0; 3]; mesh.vertices.len()];
    for t in &mesh.triangles {
        let [a, b, c] = [
            mesh.vertices[t[0]],
            mesh.vertices[t[1]],
            mesh.vertices[t[2]],
        ];
        let fnrm = cross(sub(b, a), sub(c, a));
        for &v in t {
            acc[v] = add(acc[v], fnrm);
        }
    }
    for (v, is_bad) in bad.into_iter().enumerate() {
        if is_bad {
            mesh.normals[v] = normalize(acc[v]).unwrap_or([0.0, 0.0, 1.0]);
        }
    }
}
