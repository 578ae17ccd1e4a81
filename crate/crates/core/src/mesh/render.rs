//! Orthographic software rasterizer with a depth buffer.

use super::atlas::UvTexture;
use super::mc::marching_cubes;
use super::{cross, dot, normalize, sub, TriMesh, Vec3};
use crate::error::{Error, Result};
use crate::grid::VoxelGrid;

pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
const SCENE_CENTER: Vec3 = [0.5, 0.5, 0.5];

/// Orthographic camera looking along `dir` at the centre of the unit cube.
/// `extent` is the full width and height of the view window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub dir: Vec3,
    pub up: Vec3,
    pub extent: f64,
}

impl Camera {
    pub fn new(dir: Vec3, up: Vec3, extent: f64) -> Result<Self> {
        let unit = |v: Vec3| (dot(v, v).sqrt() - 1.0).abs() < 1e-6;
        if !unit(dir) || !unit(up) {
            return Err(Error::invalid(
                "camera direction and up must be unit vectors",
            ));
        }
        if dot(dir, up).abs() > 1e-6 {
            return Err(Error::invalid(
                "camera up must be perpendicular to the view direction",
            ));
        }
        if !(extent > 0.0) {
            return Err(Error::invalid("camera extent must be positive"));
        }
        Ok(Self { dir, up, extent })
    }

    /// Looking down the depth axis, the view used for silhouettes.
    pub fn front(extent: f64) -> Self {
        Self {
            dir: [0.0, 0.0, 1.0],
            up: [0.0, 1.0, 0.0],
            extent,
        }
    }

    /// Camera on a sphere around the scene: azimuth about the `y` axis from
    /// the front view, elevation toward `+y`, both in degrees.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, extent: f64) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        // camera position direction; the view direction points back at the centre
        let pos = [el.cos() * az.sin(), el.sin(), -el.cos() * az.cos()];
        let dir = pos.map(|x| -x);
        let world_up = [0.0, 1.0, 0.0];
        let right = normalize(cross(dir, world_up)).unwrap_or([1.0, 0.0, 0.0]);
        let up = normalize(cross(right, dir)).unwrap_or(world_up);
        Self { dir, up, extent }
    }

    pub fn right(&self) -> Vec3 {
        cross(self.dir, self.up)
    }

    /// Continuous pixel coordinates and depth of a world point.
    pub fn project(&self, p: Vec3, width: usize, height: usize) -> (f64, f64, f64) {
        let q = sub(p, SCENE_CENTER);
        let x = dot(q, self.right()) / self.extent;
        let y = dot(q, self.up) / self.extent;
        (
            (x + 0.5) * width as f64,
            (0.5 - y) * height as f64,
            dot(q, self.dir),
        )
    }

    /// World point on the view plane through the scene centre at the centre
    /// of pixel `(px, py)`.
    pub fn pixel_point(&self, px: usize, py: usize, width: usize, height: usize) -> Vec3 {
        let x = ((px as f64 + 0.5) / width as f64 - 0.5) * self.extent;
        let y = (0.5 - (py as f64 + 0.5) / height as f64) * self.extent;
        let r = self.right();
        std::array::from_fn(|a| SCENE_CENTER[a] + x * r[a] + y * self.up[a])
    }
}

/// The six fixed auxiliary views: azimuths 0°, 60°, …, 300° at 20° elevation.
pub fn auxiliary_cameras(extent: f64) -> Vec<Camera> {
    (0..6)
        .map(|i| Camera::orbit(60.0 * i as f64, 20.0, extent))
        .collect()
}

/// Per-pixel nearest surface: depth (infinite where empty), triangle and
/// barycentric coordinates.
#[derive(Debug, Clone)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub triangle: Vec<Option<usize>>,
    pub bary: Vec<[f64; 3]>,
}

pub fn rasterize(mesh: &TriMesh, camera: &Camera, width: usize, height: usize) -> Fragments {
    let n = width * height;
    let mut fr = Fragments {
        width,
        height,
        depth: vec![f64::INFINITY; n],
        triangle: vec![None; n],
        bary: vec![[0.0; 3]; n],
    };
    let projected: Vec<(f64, f64, f64)> = mesh
        .vertices
        .iter()
        .map(|&p| camera.project(p, width, height))
        .collect();
    for (f, t) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = [projected[t[0]], projected[t[1]], projected[t[2]]];
        let det = (b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1);
        if det.abs() < 1e-14 {
            continue;
        }
        let x_lo = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let y_lo = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let x_hi = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(width);
        let y_hi = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(height);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let b1 = ((x - a.0) * (c.1 - a.1) - (c.0 - a.0) * (y - a.1)) / det;
                let b2 = ((b.0 - a.0) * (y - a.1) - (x - a.0) * (b.1 - a.1)) / det;
                let b0 = 1.0 - b1 - b2;
                const TOL: f64 = -1e-9;
                if b0 < TOL || b1 < TOL || b2 < TOL {
                    continue;
                }
                let z = b0 * a.2 + b1 * b.2 + b2 * c.2;
                let idx = py * width + px;
                if z < fr.depth[idx] {
                    fr.depth[idx] = z;
                    fr.triangle[idx] = Some(f);
                    fr.bary[idx] = [b0, b1, b2];
                }
            }
        }
    }
    fr
}

#[derive(Debug, Clone)]
pub struct ViewImage {
    pub camera: Camera,
    pub width: usize,
    pub height: usize,
    pub colors: Vec<[f64; 3]>,
    /// Pixels covered by the surface.
    pub coverage: Vec<bool>,
}

impl ViewImage {
    pub fn pixel(&self, px: usize, py: usize) -> [f64; 3] {
        self.colors[py * self.width + px]
    }
}

/// Surface colouring for [`render_view`].
pub enum Paint<'a> {
    Uniform([f64; 3]),
    Texture(&'a UvTexture),
    /// Colour as a function of the surface point.
    Field(&'a dyn Fn(Vec3) -> [f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shading {
    /// Two-sided flat shading from a light at the camera.
    Headlight,
    Unlit,
}

fn texture_lookup(tex: &UvTexture, mesh: &TriMesh, f: usize, bary: [f64; 3]) -> [f64; 3] {
    if !mesh.has_uvs() {
        return [0.5; 3];
    }
    let mut uv = [0.0; 2];
    for c in 0..3 {
        for k in 0..2 {
            uv[k] += bary[c] * mesh.uvs[3 * f + c][k];
        }
    }
    let a = tex.size as f64;
    let x = ((uv[0] * a).floor().max(0.0) as usize).min(tex.size - 1);
    let y = (((1.0 - uv[1]) * a).floor().max(0.0) as usize).min(tex.size - 1);
    tex.colors[y * tex.size + x]
}

pub fn render_view(
    mesh: &TriMesh,
    paint: &Paint<'_>,
    camera: &Camera,
    width: usize,
    height: usize,
    shading: Shading,
) -> ViewImage {
    let fr = rasterize(mesh, camera, width, height);
    let mut colors = vec![BACKGROUND; width * height];
    let mut coverage = vec![false; width * height];
    for idx in 0..width * height {
        let Some(f) = fr.triangle[idx] else { continue };
        let bary = fr.bary[idx];
        let base = match paint {
            Paint::Uniform(c) => *c,
            Paint::Texture(t) => texture_lookup(t, mesh, f, bary),
            Paint::Field(field) => field(mesh.point_at(f, bary)),
        };
        let shade = match shading {
            Shading::Unlit => 1.0,
            Shading::Headlight => {
                let n = normalize(mesh.face_cross(f)).unwrap_or(camera.dir);
                0.25 + 0.75 * dot(n, camera.dir).abs()
            }
        };
        colors[idx] = base.map(|c| c * shade);
        coverage[idx] = true;
    }
    ViewImage {
        camera: *camera,
        width,
        height,
        colors,
        coverage,
    }
}

/// Render the iso-surface of an occupancy grid in a uniform colour.
pub fn render_grid(
    grid: &VoxelGrid,
    iso: f64,
    color: [f64; 3],
    camera: &Camera,
    width: usize,
    height: usize,
) -> ViewImage {
    let mesh = marching_cubes(grid, iso);
    render_view(
        &mesh,
        &Paint::Uniform(color),
        camera,
        width,
        height,
        Shading::Headlight,
    )
}
