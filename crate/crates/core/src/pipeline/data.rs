//! Procedural edit cases and the per-asset encodings the models consume.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{FEATURE_DIM, FEATURE_RES, GRID_RES, LATENT_RES, LOGIT_MARGIN, THUMB_RES};
use crate::error::{Error, Result};
use crate::flow::Condition;
use crate::grid::{index, unindex, voxel_center, EditMask, StructureLatent, VoxelGrid};
use crate::repaint::SlatField;
use crate::rng::{self, Rng};
use crate::shape::{self, rasterize, tree_part_at, CsgOp, Primitive, ShapeSpec};
use crate::silhouette::render_silhouette;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    AddBump,
    CarveHole,
    ResizePart,
}

impl EditKind {
    pub const ALL: [EditKind; 3] = [EditKind::AddBump, EditKind::CarveHole, EditKind::ResizePart];
}

/// Axis-aligned box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Aabb {
    fn of(s: &ShapeSpec) -> Aabb {
        let half = match s.kind {
            Primitive::Sphere => [s.size[0]; 3],
            Primitive::Box => s.size,
            Primitive::Cylinder => [s.size[0], s.size[0], s.size[1]],
        };
        Aabb {
            lo: std::array::from_fn(|a| s.center[a] - half[a]),
            hi: std::array::from_fn(|a| s.center[a] + half[a]),
        }
    }

    fn union(self, o: Aabb) -> Aabb {
        Aabb {
            lo: std::array::from_fn(|a| self.lo[a].min(o.lo[a])),
            hi: std::array::from_fn(|a| self.hi[a].max(o.hi[a])),
        }
    }

    fn padded(self, pad: f64) -> Aabb {
        Aabb {
            lo: self.lo.map(|x| (x - pad).max(0.0)),
            hi: self.hi.map(|x| (x + pad).min(1.0)),
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

/// One benchmark edit: a source asset, the same asset with one local
/// modification, the region allowed to change, and per-part appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub id: String,
    pub kind: EditKind,
    pub seed: u64,
    pub source: Vec<ShapeSpec>,
    pub target: Vec<ShapeSpec>,
    pub mask: Aabb,
    /// RGB plus one material channel per part, indexed by pre-order node id.
    pub source_palette: Vec<[f64; 4]>,
    pub target_palette: Vec<[f64; 4]>,
}

impl EditCase {
    /// The degenerate edit whose target equals its source.
    pub fn null(id: &str, source: Vec<ShapeSpec>, palette: Vec<[f64; 4]>, mask: Aabb) -> Self {
        Self {
            id: id.to_string(),
            kind: EditKind::ResizePart,
            seed: 0,
            target: source.clone(),
            source,
            mask,
            target_palette: palette.clone(),
            source_palette: palette,
        }
    }

    pub fn mesh_mask(&self) -> EditMask {
        let m = self.mask;
        EditMask::from_fn(GRID_RES, |p| m.contains(p))
    }

    pub fn source_grid(&self) -> Result<VoxelGrid> {
        rasterize(&self.source, GRID_RES)
    }

    pub fn target_grid(&self) -> Result<VoxelGrid> {
        rasterize(&self.target, GRID_RES)
    }

    /// Every voxel where source and target differ lies inside the mask.
    pub fn is_local(&self) -> Result<bool> {
        let (s, t) = (self.source_grid()?, self.target_grid()?);
        let mask = self.mesh_mask();
        Ok(s.values()
            .iter()
            .zip(t.values())
            .zip(mask.weights())
            .all(|((a, b), &m)| a == b || m > 0.0))
    }
}

pub fn structure_latent(grid: &VoxelGrid) -> StructureLatent {
    StructureLatent::from_grid(grid, LATENT_RES, LOGIT_MARGIN)
}

/// Binary front silhouette of a latent: `S ≥ 0.5` with the default κ.
pub fn silhouette_mask(latent: &StructureLatent) -> Vec<f64> {
    render_silhouette(latent, crate::silhouette::DEFAULT_KAPPA)
        .expect("default kappa is valid")
        .binarize(0.5)
}

pub fn structure_condition(latent: &StructureLatent) -> Condition {
    Condition::new(silhouette_mask(latent))
}

fn palette_color(palette: &[[f64; 4]], part: Option<usize>) -> [f64; 4] {
    part.and_then(|p| palette.get(p).copied())
        .unwrap_or([0.5, 0.5, 0.5, 0.5])
}

/// Majority part among the occupied fine voxels of each feature voxel.
fn block_parts(tree: &[ShapeSpec], grid: &VoxelGrid) -> Vec<Option<usize>> {
    let f = GRID_RES / FEATURE_RES;
    let mut tallies: Vec<Vec<(usize, usize)>> = vec![Vec::new(); FEATURE_RES.pow(3)];
    for (v, &val) in grid.values().iter().enumerate() {
        if val < 0.5 {
            continue;
        }
        let (i, j, k) = unindex(GRID_RES, v);
        let Some(part) = tree_part_at(tree, voxel_center(GRID_RES, i, j, k)) else {
            continue;
        };
        let t = &mut tallies[index(FEATURE_RES, i / f, j / f, k / f)];
        match t.iter_mut().find(|(p, _)| *p == part) {
            Some(e) => e.1 += 1,
            None => t.push((part, 1)),
        }
    }
    tallies
        .into_iter()
        .map(|t| {
            t.into_iter()
                .max_by_key(|&(p, n)| (n, std::cmp::Reverse(p)))
                .map(|(p, _)| p)
        })
        .collect()
}

/// Feature voxels touching any occupied fine voxel.
pub fn feature_activity(grid: &VoxelGrid) -> Vec<bool> {
    let f = grid.res() / FEATURE_RES;
    let mut act = vec![false; FEATURE_RES.pow(3)];
    for (v, &val) in grid.values().iter().enumerate() {
        if val >= 0.5 {
            let (i, j, k) = unindex(grid.res(), v);
            act[index(FEATURE_RES, i / f, j / f, k / f)] = true;
        }
    }
    act
}

/// Appearance features of `tree` painted with `palette`, over `activity`.
/// Active voxels without any material of `tree` get zero features.
pub fn appearance_field(
    tree: &[ShapeSpec],
    grid: &VoxelGrid,
    palette: &[[f64; 4]],
    activity: Vec<bool>,
) -> Result<SlatField> {
    let parts = block_parts(tree, grid);
    let mut feats = vec![0.0; FEATURE_RES.pow(3) * FEATURE_DIM];
    for (v, part) in parts.iter().enumerate() {
        if activity[v] && part.is_some() {
            feats[v * FEATURE_DIM..(v + 1) * FEATURE_DIM]
                .copy_from_slice(&palette_color(palette, *part));
        }
    }
    SlatField::new(FEATURE_RES, FEATURE_DIM, feats, activity)
}

/// Front colour thumbnail (`THUMB_RES² × 3`): per pixel, the mean colour of
/// the nearest occupied voxel in each fine column it covers; empty is 0.
pub fn color_thumbnail(tree: &[ShapeSpec], grid: &VoxelGrid, palette: &[[f64; 4]]) -> Vec<f64> {
    let f = GRID_RES / THUMB_RES;
    let mut out = vec![0.0; THUMB_RES * THUMB_RES * 3];
    for ti in 0..THUMB_RES {
        for tj in 0..THUMB_RES {
            let mut acc = [0.0; 3];
            for i in ti * f..(ti + 1) * f {
                for j in tj * f..(tj + 1) * f {
                    if let Some(k) = (0..GRID_RES).find(|&k| grid.get(i, j, k) >= 0.5) {
                        let c = palette_color(
                            palette,
                            tree_part_at(tree, voxel_center(GRID_RES, i, j, k)),
                        );
                        for a in 0..3 {
                            acc[a] += c[a];
                        }
                    }
                }
            }
            for a in 0..3 {
                out[(ti * THUMB_RES + tj) * 3 + a] = acc[a] / (f * f) as f64;
            }
        }
    }
    out
}

/// Colour of the part nearest to `p`, probing a small neighbourhood when
/// `p` sits just outside the material.
pub fn color_near(tree: &[ShapeSpec], palette: &[[f64; 4]], p: [f64; 3]) -> [f64; 3] {
    let h = 1.0 / GRID_RES as f64;
    for radius in [0.0, 0.5 * h, h, 2.0 * h] {
        let mut best: Option<usize> = None;
        for d in OFFSETS {
            let q = std::array::from_fn(|a| p[a] + radius * d[a]);
            if let Some(part) = tree_part_at(tree, q) {
                best = Some(part);
                break;
            }
            if radius == 0.0 {
                break;
            }
        }
        if let Some(part) = best {
            let c = palette_color(palette, Some(part));
            return [c[0], c[1], c[2]];
        }
    }
    [0.5; 3]
}

const OFFSETS: [[f64; 3]; 7] = [
    [0.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, -1.0],
    [0.0, 0.0, 1.0],
];

fn random_color(r: &mut Rng) -> [f64; 4] {
    [
        r.random_range(0.1..0.95),
        r.random_range(0.1..0.95),
        r.random_range(0.1..0.95),
        r.random_range(0.0..1.0),
    ]
}

fn clamp_center(c: [f64; 3], half: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| c[a].clamp(0.04 + half[a], 0.96 - half[a]))
}

/// Distance from the body centre to its surface along unit direction `d`
/// in the image plane.
fn body_reach(body: &ShapeSpec, d: [f64; 2]) -> f64 {
    match body.kind {
        Primitive::Sphere | Primitive::Cylinder => body.size[0],
        Primitive::Box => {
            let tx = if d[0].abs() > 1e-9 {
                body.size[0] / d[0].abs()
            } else {
                f64::INFINITY
            };
            let ty = if d[1].abs() > 1e-9 {
                body.size[1] / d[1].abs()
            } else {
                f64::INFINITY
            };
            tx.min(ty)
        }
    }
}

fn attached_blob(r: &mut Rng, body: &ShapeSpec, lo: f64, hi: f64) -> ShapeSpec {
    let ang = r.random_range(0.0..std::f64::consts::TAU);
    let d = [ang.cos(), ang.sin()];
    let size = r.random_range(lo..hi);
    let reach = body_reach(body, d) + 0.3 * size;
    let c = [
        body.center[0] + d[0] * reach,
        body.center[1] + d[1] * reach,
        body.center[2] + r.random_range(-0.05..0.05),
    ];
    if r.random_bool(0.5) {
        ShapeSpec::sphere(clamp_center(c, [size; 3]), size)
    } else {
        let half = [
            size,
            size * r.random_range(0.7..1.0),
            size * r.random_range(0.7..1.0),
        ];
        ShapeSpec::cuboid(clamp_center(c, half), half)
    }
}

/// A body primitive with one or two attached parts, plus its palette.
pub fn random_asset(r: &mut Rng) -> (Vec<ShapeSpec>, Vec<[f64; 4]>) {
    let center = [
        0.5 + r.random_range(-0.04..0.04),
        0.5 + r.random_range(-0.04..0.04),
        0.5 + r.random_range(-0.03..0.03),
    ];
    let mut body = match r.random_range(0..3) {
        0 => ShapeSpec::sphere(center, r.random_range(0.2..0.28)),
        1 => ShapeSpec::cuboid(
            center,
            [
                r.random_range(0.15..0.25),
                r.random_range(0.15..0.25),
                r.random_range(0.15..0.25),
            ],
        ),
        _ => ShapeSpec::cylinder(
            center,
            r.random_range(0.17..0.25),
            r.random_range(0.15..0.25),
        ),
    };
    let parts = r.random_range(1..=2);
    for _ in 0..parts {
        let blob = attached_blob(r, &body, 0.07, 0.12);
        body = body.with_child(blob);
    }
    let palette = (0..body.node_count()).map(|_| random_color(r)).collect();
    (vec![body], palette)
}

fn recolor(r: &mut Rng, base: [f64; 4]) -> [f64; 4] {
    loop {
        let c = random_color(r);
        let diff: f64 = (0..3).map(|a| (c[a] - base[a]).abs()).sum();
        if diff > 0.6 {
            return c;
        }
    }
}

/// Apply one random edit of `kind`; returns the target, its palette and
/// the padded edit box.
pub fn apply_edit(
    r: &mut Rng,
    kind: EditKind,
    source: &[ShapeSpec],
    palette: &[[f64; 4]],
) -> (Vec<ShapeSpec>, Vec<[f64; 4]>, Aabb) {
    let pad = 2.0 / GRID_RES as f64;
    let body = &source[0];
    let mut target = source.to_vec();
    let mut tpal = palette.to_vec();
    let region = match kind {
        EditKind::AddBump => {
            let bump = attached_blob(r, body, 0.07, 0.11);
            let region = Aabb::of(&bump);
            target[0].children.push(bump);
            tpal.push(recolor(r, palette[0]));
            region
        }
        EditKind::CarveHole => {
            let rad = r.random_range(0.05..0.08);
            let off = body.size[0] * 0.35;
            let c = [
                body.center[0] + r.random_range(-off..off),
                body.center[1] + r.random_range(-off..off),
                0.5,
            ];
            let hole = ShapeSpec::cylinder(c, rad, 0.5).with_op(CsgOp::Difference);
            let region = Aabb::of(&hole);
            target[0].children.push(hole);
            tpal.push(palette[0]);
            region
        }
        EditKind::ResizePart => {
            let which = r.random_range(0..body.children.len());
            let part = &mut target[0].children[which];
            let before = Aabb::of(part);
            let factor = *[0.6, 0.7, 1.35, 1.5].choose(r).unwrap();
            for s in part.size.iter_mut() {
                *s = (*s * factor).min(0.3);
            }
            let half = Aabb::of(part);
            let half = [0, 1, 2].map(|a| 0.5 * (half.hi[a] - half.lo[a]));
            part.center = clamp_center(part.center, half);
            let region = before.union(Aabb::of(part));
            // pre-order id of the resized child: 1 + nodes before it
            let id = 1 + body.children[..which]
                .iter()
                .map(ShapeSpec::node_count)
                .sum::<usize>();
            tpal[id] = recolor(r, palette[id]);
            region
        }
    };
    (target, tpal, region.padded(pad))
}

fn case_is_usable(case: &EditCase) -> Result<bool> {
    if !case.is_local()? {
        return Ok(false);
    }
    let (s, t) = (case.source_grid()?, case.target_grid()?);
    let (ls, lt) = (structure_latent(&s), structure_latent(&t));
    let changed = silhouette_mask(&ls)
        .iter()
        .zip(silhouette_mask(&lt))
        .filter(|(a, b)| **a != *b)
        .count();
    let volume = case.mesh_mask().support() as f64 / GRID_RES.pow(3) as f64;
    Ok(changed >= 4 && volume <= 0.35)
}

/// Sample one usable edit case; draws are retried until the locality and
/// visibility checks pass.
pub fn sample_case(id: &str, seed: u64, kind: EditKind) -> Result<EditCase> {
    for attempt in 0..1000u64 {
        let mut r = rng::rng(rng::derive(seed, &[attempt]));
        let (source, palette) = random_asset(&mut r);
        let (target, tpal, mask) = apply_edit(&mut r, kind, &source, &palette);
        if shape::rasterize(&target, GRID_RES).is_err() {
            continue;
        }
        let case = EditCase {
            id: id.to_string(),
            kind,
            seed,
            source,
            target,
            mask,
            source_palette: palette,
            target_palette: tpal,
        };
        if case_is_usable(&case)? {
            return Ok(case);
        }
    }
    Err(Error::invalid(format!(
        "could not sample a usable {kind:?} case for seed {seed}"
    )))
}

/// `count` cases cycling through the edit families.
pub fn generate_cases(count: usize, seed: u64) -> Result<Vec<EditCase>> {
    if count == 0 {
        return Err(Error::invalid("case count must be at least 1"));
    }
    (0..count)
        .map(|i| {
            let kind = EditKind::ALL[i % EditKind::ALL.len()];
            sample_case(
                &format!("case_{i:03}"),
                rng::derive(seed, &[i as u64]),
                kind,
            )
        })
        .collect()
}

pub fn write_case(case: &EditCase, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(case).map_err(|e| Error::Parse(e.to_string()))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("case.json", json.into_bytes())?;
    put("source.shape", shape::serialize(&case.source).into_bytes())?;
    put("target.shape", shape::serialize(&case.target).into_bytes())?;
    let (s, t) = (case.source_grid()?, case.target_grid()?);
    put("source.voxgrid", s.to_dump().into_bytes())?;
    put("target.voxgrid", t.to_dump().into_bytes())?;
    put(
        "mask.voxgrid",
        case.mesh_mask().to_grid().to_dump().into_bytes(),
    )?;
    let sil = |g: &VoxelGrid| {
        crate::silhouette::encode_pgm(
            &silhouette_mask(&structure_latent(g)),
            LATENT_RES,
            LATENT_RES,
        )
    };
    put("source_sil.pgm", sil(&s))?;
    put("target_sil.pgm", sil(&t))?;
    Ok(written)
}

pub fn read_case(dir: &Path) -> Result<EditCase> {
    let p = dir.join("case.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_cases_are_local_and_deterministic() {
        let a = generate_cases(6, 17).unwrap();
        let b = generate_cases(6, 17).unwrap();
        assert_eq!(a, b);
        for c in &a {
            assert!(c.is_local().unwrap());
            assert_ne!(c.source_grid().unwrap(), c.target_grid().unwrap());
            assert_eq!(c.target_palette.len(), c.target[0].node_count());
        }
        let kinds: Vec<_> = a.iter().map(|c| c.kind).collect();
        assert_eq!(&kinds[..3], &EditKind::ALL);
    }

    #[test]
    fn appearance_field_follows_parts() {
        let body = ShapeSpec::cuboid([0.5; 3], [0.3; 3])
            .with_child(ShapeSpec::cuboid([0.5, 0.5, 0.25], [0.3, 0.3, 0.05]));
        let tree = vec![body];
        let pal = vec![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 1.0]];
        let g = rasterize(&tree, GRID_RES).unwrap();
        let act = feature_activity(&g);
        let f = appearance_field(&tree, &g, &pal, act.clone()).unwrap();
        let centre = index(FEATURE_RES, 4, 4, 4);
        assert!(act[centre]);
        assert_eq!(f.voxel(centre), &pal[0]);
        assert!(!act[0]);
        assert!(f.voxel(0).iter().all(|&x| x == 0.0));
        let thumb = color_thumbnail(&tree, &g, &pal);
        // the front plate (child, green) is what the camera sees
        let mid = (8 * THUMB_RES + 8) * 3;
        assert_eq!(&thumb[mid..mid + 3], &[0.0, 1.0, 0.0]);
        assert_eq!(&thumb[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(color_near(&tree, &pal, [0.5, 0.5, 0.19]), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn case_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cases(1, 3).unwrap().remove(0);
        let files = write_case(&c, dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        assert_eq!(read_case(dir.path()).unwrap(), c);
    }
}
