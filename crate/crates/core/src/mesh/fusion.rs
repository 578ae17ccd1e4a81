//! Visibility-aware, mask-weighted fusion of view images into a UV atlas.

use super::atlas::{TexelMap, UvTexture};
use super::render::{rasterize, Camera, Fragments, ViewImage};
use super::{dot, TriMesh, Vec3};
use crate::error::{Error, Result};
use crate::grid::EditMask;

pub const DEFAULT_EXPONENT: f64 = 2.0;
/// Depth-test slack as a fraction of the camera window extent.
pub const DEPTH_BIAS: f64 = 1e-3;

/// `visible · max(0, −n·d)^p` for a surface point seen by one view, along
/// with the pixel it projects to. The depth test compares against the plane
/// of the nearest triangle at that pixel, evaluated at the point's exact
/// image position, so oblique surfaces do not self-occlude within a pixel.
pub fn view_weight(
    mesh: &TriMesh,
    point: Vec3,
    normal: Vec3,
    camera: &Camera,
    depth: &Fragments,
    exponent: f64,
) -> Option<(f64, usize)> {
    let (fx, fy, z) = camera.project(point, depth.width, depth.height);
    if fx < 0.0 || fy < 0.0 {
        return None;
    }
    let (px, py) = (fx as usize, fy as usize);
    if px >= depth.width || py >= depth.height {
        return None;
    }
    let idx = py * depth.width + px;
    let f = depth.triangle[idx]?;
    let [a, b, c] = mesh
        .corners(f)
        .map(|v| camera.project(v, depth.width, depth.height));
    let det = (b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1);
    let surface = if det.abs() < 1e-14 {
        depth.depth[idx]
    } else {
        let b1 = ((fx - a.0) * (c.1 - a.1) - (c.0 - a.0) * (fy - a.1)) / det;
        let b2 = ((b.0 - a.0) * (fy - a.1) - (fx - a.0) * (b.1 - a.1)) / det;
        (1.0 - b1 - b2) * a.2 + b1 * b.2 + b2 * c.2
    };
    if z > surface + DEPTH_BIAS * camera.extent {
        return Some((0.0, idx));
    }
    let facing = (-dot(normal, camera.dir)).max(0.0);
    Some((facing.powf(exponent), idx))
}

/// Blend view colours into `t_orig`: each valid texel gets
/// `(1 − m)·T_orig + m·Σ w_v c_v / Σ w_v`, where `m` is the mask sampled at
/// the texel's surface point. Texels with `m = 0` or no visible view keep
/// their original colour.
pub fn fuse_texture(
    mesh: &TriMesh,
    map: &TexelMap,
    views: &[ViewImage],
    mask: &EditMask,
    t_orig: &UvTexture,
    exponent: f64,
) -> Result<UvTexture> {
    if views.is_empty() {
        return Err(Error::invalid("texture fusion needs at least one view"));
    }
    if t_orig.size != map.size {
        return Err(Error::invalid(format!(
            "original texture is {}x{} but the atlas is {}x{}",
            t_orig.size, t_orig.size, map.size, map.size
        )));
    }
    let buffers: Vec<Fragments> = views
        .iter()
        .map(|v| rasterize(mesh, &v.camera, v.width, v.height))
        .collect();
    let mut out = t_orig.clone();
    for (idx, owner) in map.owners.iter().enumerate() {
        let Some(s) = owner else { continue };
        let p = mesh.point_at(s.triangle, s.bary);
        let m = mask.sample(p);
        if m == 0.0 {
            continue;
        }
        let n = mesh.interpolated_normal(s.triangle, s.bary);
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for (view, depth) in views.iter().zip(&buffers) {
            if let Some((w, pix)) = view_weight(mesh, p, n, &view.camera, depth, exponent) {
                if w > 0.0 {
                    let c = view.colors[pix];
                    for k in 0..3 {
                        acc[k] += w * c[k];
                    }
                    total += w;
                }
            }
        }
        if total <= 0.0 {
            continue;
        }
        let orig = t_orig.colors[idx];
        out.colors[idx] = std::array::from_fn(|k| {
            let blended = acc[k] / total;
            if m == 1.0 {
                blended
            } else {
                (1.0 - m) * orig[k] + m * blended
            }
        });
    }
    Ok(out)
}
