//! Procedural CSG shapes and their voxelization.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{unindex, voxel_center, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    /// `size[0]` is the radius.
    Sphere,
    /// `size` holds the half-extents.
    Box,
    /// Axis along depth (`k`); `size[0]` radius, `size[1]` half-length.
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsgOp {
    Union,
    Difference,
}

/// One node of a CSG tree. A node's region is its primitive, then each child
/// in order is unioned into or subtracted from it according to the child's op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: Primitive,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub op: CsgOp,
    pub children: Vec<ShapeSpec>,
}

impl ShapeSpec {
    pub fn new(kind: Primitive, center: [f64; 3], size: [f64; 3]) -> Self {
        Self {
            kind,
            center,
            size,
            op: CsgOp::Union,
            children: Vec::new(),
        }
    }

    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        Self::new(Primitive::Sphere, center, [radius; 3])
    }

    pub fn cuboid(center: [f64; 3], half: [f64; 3]) -> Self {
        Self::new(Primitive::Box, center, half)
    }

    pub fn cylinder(center: [f64; 3], radius: f64, half_len: f64) -> Self {
        Self::new(Primitive::Cylinder, center, [radius, half_len, 0.0])
    }

    pub fn with_op(mut self, op: CsgOp) -> Self {
        self.op = op;
        self
    }

    pub fn with_child(mut self, child: ShapeSpec) -> Self {
        self.children.push(child);
        self
    }

    fn primitive_contains(&self, p: [f64; 3]) -> bool {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        match self.kind {
            Primitive::Sphere => {
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= self.size[0] * self.size[0]
            }
            Primitive::Box => (0..3).all(|a| d[a].abs() <= self.size[a]),
            Primitive::Cylinder => {
                d[0] * d[0] + d[1] * d[1] <= self.size[0] * self.size[0]
                    && d[2].abs() <= self.size[1]
            }
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.owner_from(p, &mut 0).is_some()
    }

    /// Pre-order index of the node whose material occupies `p`, if any.
    /// Later unions paint over earlier ones.
    pub fn part_at(&self, p: [f64; 3]) -> Option<usize> {
        self.owner_from(p, &mut 0)
    }

    fn owner_from(&self, p: [f64; 3], next_id: &mut usize) -> Option<usize> {
        let id = *next_id;
        *next_id += 1;
        let mut owner = self.primitive_contains(p).then_some(id);
        for child in &self.children {
            let hit = child.owner_from(p, next_id);
            match child.op {
                CsgOp::Union => {
                    if hit.is_some() {
                        owner = hit;
                    }
                }
                CsgOp::Difference => {
                    if hit.is_some() {
                        owner = None;
                    }
                }
            }
        }
        owner
    }

    /// Total number of nodes in this subtree.
    pub fn node_count(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(ShapeSpec::node_count)
            .sum::<usize>()
    }

    fn validate(&self) -> Result<()> {
        let in_unit = |v: &[f64; 3]| v.iter().all(|x| (0.0..=1.0).contains(x));
        if !in_unit(&self.center) || !in_unit(&self.size) {
            return Err(Error::invalid(format!(
                "shape parameters outside [0,1]: center {:?} size {:?}",
                self.center, self.size
            )));
        }
        self.children.iter().try_for_each(ShapeSpec::validate)
    }

    fn write_block(&self, out: &mut String) {
        let kind = match self.kind {
            Primitive::Sphere => "sphere",
            Primitive::Box => "box",
            Primitive::Cylinder => "cylinder",
        };
        let op = match self.op {
            CsgOp::Union => "union",
            CsgOp::Difference => "difference",
        };
        let [cx, cy, cz] = self.center;
        let [sx, sy, sz] = self.size;
        let _ = writeln!(out, "kind = {kind}");
        let _ = writeln!(out, "center = {cx} {cy} {cz}");
        let _ = writeln!(out, "size = {sx} {sy} {sz}");
        let _ = writeln!(out, "op = {op}");
        let _ = writeln!(out, "children = {}", self.children.len());
        out.push('\n');
        for c in &self.children {
            c.write_block(out);
        }
    }
}

/// Voxelize a forest of top-level nodes (combined in order by their ops).
/// A voxel is occupied iff its center satisfies the CSG predicate.
pub fn rasterize(tree: &[ShapeSpec], res: usize) -> Result<VoxelGrid> {
    if res < 4 {
        return Err(Error::invalid(format!("resolution {res} below minimum 4")));
    }
    if tree.is_empty() {
        return Err(Error::invalid("empty shape tree"));
    }
    tree.iter().try_for_each(ShapeSpec::validate)?;
    let mut grid = VoxelGrid::zeros(res);
    for (v, out) in grid.values_mut().iter_mut().enumerate() {
        let (i, j, k) = unindex(res, v);
        if tree_contains(tree, voxel_center(res, i, j, k)) {
            *out = 1.0;
        }
    }
    Ok(grid)
}

pub fn tree_contains(tree: &[ShapeSpec], p: [f64; 3]) -> bool {
    tree_part_at(tree, p).is_some()
}

/// Part index over the whole forest (pre-order across roots).
pub fn tree_part_at(tree: &[ShapeSpec], p: [f64; 3]) -> Option<usize> {
    let mut next = 0;
    let mut owner = None;
    for node in tree {
        let hit = node.owner_from(p, &mut next);
        match node.op {
            CsgOp::Union => {
                if hit.is_some() {
                    owner = hit;
                }
            }
            CsgOp::Difference => {
                if hit.is_some() {
                    owner = None;
                }
            }
        }
    }
    owner
}

/// Line-based `key = value` serialization, one block per node in pre-order.
pub fn serialize(tree: &[ShapeSpec]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "roots = {}\n", tree.len());
    for node in tree {
        node.write_block(&mut out);
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<ShapeSpec>> {
    let mut blocks: Vec<Vec<(String, String)>> = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key = value, got {line:?}")))?;
        current.push((k.trim().to_string(), v.trim().to_string()));
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    let mut iter = blocks.into_iter();
    let header = iter
        .next()
        .ok_or_else(|| Error::Parse("empty shape description".into()))?;
    let roots: usize = lookup(&header, "roots")?
        .parse()
        .map_err(|_| Error::Parse("bad roots count".into()))?;
    let tree = (0..roots)
        .map(|_| parse_node(&mut iter))
        .collect::<Result<Vec<_>>>()?;
    if iter.next().is_some() {
        return Err(Error::Parse("trailing shape blocks".into()));
    }
    Ok(tree)
}

fn lookup<'a>(block: &'a [(String, String)], key: &str) -> Result<&'a str> {
    block
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Parse(format!("missing key {key}")))
}

fn parse_vec3(s: &str) -> Result<[f64; 3]> {
    let vals = s
        .split_ascii_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Parse(format!("{t}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    vals.try_into()
        .map_err(|_| Error::Parse(format!("expected 3 components in {s:?}")))
}

fn parse_node(iter: &mut impl Iterator<Item = Vec<(String, String)>>) -> Result<ShapeSpec> {
    let block = iter
        .next()
        .ok_or_else(|| Error::Parse("missing shape node".into()))?;
    let kind = match lookup(&block, "kind")? {
        "sphere" => Primitive::Sphere,
        "box" => Primitive::Box,
        "cylinder" => Primitive::Cylinder,
        other => return Err(Error::Parse(format!("unknown primitive {other}"))),
    };
    let op = match lookup(&block, "op")? {
        "union" => CsgOp::Union,
        "difference" => CsgOp::Difference,
        other => return Err(Error::Parse(format!("unknown op {other}"))),
    };
    let n: usize = lookup(&block, "children")?
        .parse()
        .map_err(|_| Error::Parse("bad children count".into()))?;
    let children = (0..n)
        .map(|_| parse_node(iter))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapeSpec {
        kind,
        center: parse_vec3(lookup(&block, "center")?)?,
        size: parse_vec3(lookup(&block, "size")?)?,
        op,
        children,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn covering_sphere_fills_grid() {
        // farthest voxel center at R=8 lies sqrt(3) * 7/16 ≈ 0.758 from the middle
        let g = rasterize(&[ShapeSpec::sphere([0.5; 3], 0.8)], 8).unwrap();
        assert_eq!(g.count_above(0.5), 512);
    }

    #[test]
    fn degenerate_sphere_is_empty() {
        let g = rasterize(&[ShapeSpec::sphere([0.5; 3], 0.0)], 8).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(rasterize(&[ShapeSpec::sphere([0.5; 3], 0.3)], 3).is_err());
        assert!(rasterize(&[], 8).is_err());
        assert!(rasterize(&[ShapeSpec::sphere([1.5, 0.5, 0.5], 0.3)], 8).is_err());
    }

    #[test]
    fn nested_box_difference_matches_brute_force() {
        let outer = [0.3, 0.35, 0.25];
        let inner = [0.12, 0.1, 0.15];
        let tree = [ShapeSpec::cuboid([0.5; 3], outer)
            .with_child(ShapeSpec::cuboid([0.5; 3], inner).with_op(CsgOp::Difference))];
        let g = rasterize(&tree, 16).unwrap();
        let in_box = |p: [f64; 3], h: [f64; 3]| (0..3).all(|a| (p[a] - 0.5).abs() <= h[a]);
        let (mut n_outer, mut n_inner) = (0, 0);
        for i in 0..16 {
            for j in 0..16 {
                for k in 0..16 {
                    let p = voxel_center(16, i, j, k);
                    n_outer += in_box(p, outer) as usize;
                    n_inner += in_box(p, inner) as usize;
                }
            }
        }
        assert!(n_inner > 0);
        assert_eq!(g.count_above(0.5), n_outer - n_inner);
    }

    #[test]
    fn part_labels_follow_paint_order() {
        let tree = [
            ShapeSpec::sphere([0.5; 3], 0.3).with_child(ShapeSpec::sphere([0.5, 0.8, 0.5], 0.1))
        ];
        assert_eq!(tree_part_at(&tree, [0.5, 0.5, 0.5]), Some(0));
        assert_eq!(tree_part_at(&tree, [0.5, 0.85, 0.5]), Some(1));
        assert_eq!(tree_part_at(&tree, [0.05, 0.05, 0.05]), None);
    }

    fn arb_node(depth: u32) -> BoxedStrategy<ShapeSpec> {
        let leaf = (
            0..3u8,
            prop::array::uniform3(0.0f64..1.0),
            prop::array::uniform3(0.0f64..0.5),
            any::<bool>(),
        )
            .prop_map(|(k, c, s, d)| ShapeSpec {
                kind: [Primitive::Sphere, Primitive::Box, Primitive::Cylinder][k as usize],
                center: c,
                size: s,
                op: if d { CsgOp::Difference } else { CsgOp::Union },
                children: vec![],
            });
        if depth == 0 {
            return leaf.boxed();
        }
        (leaf, prop::collection::vec(arb_node(depth - 1), 0..3))
            .prop_map(|(mut n, c)| {
                n.children = c;
                n
            })
            .boxed()
    }

    proptest! {
        #[test]
        fn serialization_roundtrip_preserves_rasterization(tree in prop::collection::vec(arb_node(2), 1..3)) {
            let text = serialize(&tree);
            let back = parse(&text).unwrap();
            prop_assert_eq!(&back, &tree);
            prop_assert_eq!(rasterize(&back, 8).unwrap(), rasterize(&tree, 8).unwrap());
        }
    }
}
