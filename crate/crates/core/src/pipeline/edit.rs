//! The full edit of one case: structure edit, appearance repaint, surface
//! extraction, texture fusion, export and scoring.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::data::{
    appearance_field, color_near, color_thumbnail, feature_activity, silhouette_mask,
    structure_condition, structure_latent, EditCase,
};
use super::metrics::{occupancy_iou, CaseMetrics};
use super::training::{load_checkpoint, Which};
use super::{GRID_RES, LATENT_RES};
use crate::error::{Error, Result};
use crate::flow::{AnalyticPointMass, Condition, VelocityModel};
use crate::flowedit::{flowedit_run, EditState, FlowEditConfig};
use crate::grid::{decode, downsample_mask, feather, index, EditMask, StructureLatent, VoxelGrid};
use crate::mesh::{
    atlas_uv, auxiliary_cameras, bake_texture, chamfer_distance, export_obj, fuse_texture,
    marching_cubes, render_view, write_ppm, Camera, Paint, Shading, TexelMap, TriMesh, UvTexture,
    DEFAULT_ISO,
};
use crate::repaint::{build_feature_mask, repaint_run, RepaintConfig, SlatField};
use crate::silhouette::{bce_energy, iou, render_silhouette, write_pgm};

/// Orthographic extent that frames the unit cube from every orbit view.
pub const VIEW_EXTENT: f64 = 1.2;

/// Velocity fields used by an edit run.
#[derive(Debug, Clone)]
pub enum Models {
    Trained {
        structure: VelocityModel,
        appearance: VelocityModel,
    },
    /// Closed-form point-mass fields anchored at each case's own source and
    /// target encodings; guidance is off and CFG is 1.
    Oracle,
}

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Models::Trained {
            structure: VelocityModel::Mlp(load_checkpoint(dir, Which::Structure)?),
            appearance: VelocityModel::Mlp(load_checkpoint(dir, Which::Appearance)?),
        })
    }
}

/// Wall-clock seconds per stage; kept out of the hashed artifacts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseTimings {
    pub structure: f64,
    pub repaint: f64,
    pub mesh: f64,
    pub texture: f64,
    pub export: f64,
}

fn pointmass(pairs: Vec<(Condition, Vec<f64>)>, null: Vec<f64>) -> Result<VelocityModel> {
    Ok(VelocityModel::PointMass(AnalyticPointMass::new(
        pairs, null,
    )?))
}

/// Colour of a feature field at a point: trilinear over the neighbouring
/// active voxels, renormalized; the nearest voxel's colour if none is active.
pub fn slat_color_at(field: &SlatField, p: [f64; 3]) -> [f64; 3] {
    let res = field.res();
    let mut lo = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let u = (p[a] * res as f64 - 0.5).clamp(0.0, (res - 1) as f64);
        lo[a] = (u.floor() as usize).min(res.saturating_sub(2));
        frac[a] = u - lo[a] as f64;
    }
    let (mut acc, mut wsum) = ([0.0; 3], 0.0);
    for corner in 0..8 {
        let d = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let c = [lo[0] + d[0], lo[1] + d[1], lo[2] + d[2]];
        if c.iter().any(|&x| x >= res) {
            continue;
        }
        let v = index(res, c[0], c[1], c[2]);
        if !field.activity()[v] {
            continue;
        }
        let w: f64 = (0..3)
            .map(|a| if d[a] == 1 { frac[a] } else { 1.0 - frac[a] })
            .product();
        let col = field.color(v);
        for a in 0..3 {
            acc[a] += w * col[a];
        }
        wsum += w;
    }
    if wsum > 0.0 {
        return acc.map(|x| x / wsum);
    }
    let near = |x: f64| ((x * res as f64).floor().max(0.0) as usize).min(res - 1);
    field.color(index(res, near(p[0]), near(p[1]), near(p[2])))
}

struct Written(Vec<PathBuf>);

impl Written {
    fn put(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.0.push(path);
        Ok(())
    }
}

/// Everything a case run produced.
#[derive(Debug, Clone)]
pub struct CaseOutput {
    pub metrics: CaseMetrics,
    pub timings: CaseTimings,
    pub latent: StructureLatent,
    pub grid: VoxelGrid,
    pub mesh: TriMesh,
    pub files: Vec<PathBuf>,
}

/// Run the edit pipeline for one case, writing its artifacts into `out`.
pub fn run_case(case: &EditCase, models: &Models, cfg: &Config, out: &Path) -> Result<CaseOutput> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Written(Vec::new());
    let mut timings = CaseTimings::default();
    let clock = Instant::now();

    let source_grid = case.source_grid()?;
    let target_grid = case.target_grid()?;
    let src_latent = structure_latent(&source_grid);
    let tgt_latent = structure_latent(&target_grid);
    let src_cond = structure_condition(&src_latent);
    let tgt_cond = structure_condition(&tgt_latent);
    let target_sil = tgt_cond.values().to_vec();
    let mesh_mask = case.mesh_mask();
    let latent_mask = downsample_mask(&mesh_mask, LATENT_RES, cfg.run.mask_dilation)?;

    let oracle;
    let (structure_model, fe_cfg) = match models {
        Models::Trained { structure, .. } => (structure, cfg.flowedit.clone()),
        Models::Oracle => {
            oracle = pointmass(
                vec![
                    (src_cond.clone(), src_latent.logits().to_vec()),
                    (tgt_cond.clone(), tgt_latent.logits().to_vec()),
                ],
                src_latent.logits().to_vec(),
            )?;
            let fe = FlowEditConfig {
                cfg_src: 1.0,
                cfg_tgt: 1.0,
                gamma: 0.0,
                eta: 0.0,
                ..cfg.flowedit.clone()
            };
            (&oracle, fe)
        }
    };

    let every = cfg.run.trajectory_every;
    let traj_dir = out.join("trajectory");
    let mut dumps: Vec<(usize, VoxelGrid)> = Vec::new();
    let mut observer = |s: EditState<'_>| {
        if every > 0 && s.step.is_multiple_of(every) {
            dumps.push((s.step, decode(s.x_t)));
        }
    };
    let edited = flowedit_run(
        structure_model,
        &src_latent,
        &latent_mask,
        &src_cond,
        &tgt_cond,
        &target_sil,
        &fe_cfg,
        Some(&mut observer),
    )?;
    if !dumps.is_empty() {
        std::fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;
        for (step, g) in &dumps {
            files.put(
                traj_dir.join(format!("step_{step:03}.voxgrid")),
                g.to_dump(),
            )?;
        }
    }
    let grid = edited.to_grid(GRID_RES);
    files.put(out.join("edited.voxgrid"), grid.to_dump())?;
    files.put(out.join("edited_latent.voxgrid"), decode(&edited).to_dump())?;
    let sil = silhouette_mask(&edited);
    let sil_path = out.join("edited_sil.pgm");
    write_pgm(&sil_path, &sil, LATENT_RES, LATENT_RES)?;
    files.0.push(sil_path);
    timings.structure = clock.elapsed().as_secs_f64();

    // appearance
    let clock = Instant::now();
    let activity = feature_activity(&grid);
    let z_src = appearance_field(
        &case.source,
        &source_grid,
        &case.source_palette,
        activity.clone(),
    )?;
    let feature_mask = build_feature_mask(&mesh_mask, &activity, cfg.repaint.sigma_b)?;
    let thumb = Condition::new(color_thumbnail(
        &case.target,
        &target_grid,
        &case.target_palette,
    ));
    let oracle;
    let (appearance_model, rp_cfg) = match models {
        Models::Trained { appearance, .. } => (appearance, cfg.repaint.clone()),
        Models::Oracle => {
            let goal = appearance_field(
                &case.target,
                &target_grid,
                &case.target_palette,
                activity.clone(),
            )?;
            oracle = pointmass(
                vec![(thumb.clone(), goal.features().to_vec())],
                goal.features().to_vec(),
            )?;
            (
                &oracle,
                RepaintConfig {
                    cfg_scale: 1.0,
                    ..cfg.repaint.clone()
                },
            )
        }
    };
    let slat = repaint_run(&z_src, &feature_mask, appearance_model, &thumb, &rp_cfg)?;
    files.put(out.join("edited.slatf"), slat.to_dump())?;
    timings.repaint = clock.elapsed().as_secs_f64();

    // surface
    let clock = Instant::now();
    let mesh = marching_cubes(&grid, DEFAULT_ISO);
    let target_mesh = marching_cubes(&tgt_latent.to_grid(GRID_RES), DEFAULT_ISO);
    let chamfer = chamfer_distance(&mesh.vertices, &target_mesh.vertices);
    timings.mesh = clock.elapsed().as_secs_f64();

    // texture
    let clock = Instant::now();
    let mut texture_error = None;
    let (mesh, texture) = if mesh.is_empty() {
        (mesh, UvTexture::blank(cfg.texture.atlas_size))
    } else {
        let charted = atlas_uv(&mesh, cfg.texture.atlas_size)?;
        let map = TexelMap::new(&charted, cfg.texture.atlas_size)?;
        let t_orig = bake_texture(&charted, &map, |p, _| slat_color_at(&slat, p));
        let texture = if cfg.texture.enabled {
            let truth = |p: [f64; 3]| color_near(&case.target, &case.target_palette, p);
            let views: Vec<_> = auxiliary_cameras(VIEW_EXTENT)
                .iter()
                .map(|cam| {
                    let res = cfg.texture.view_res;
                    render_view(
                        &charted,
                        &Paint::Field(&truth),
                        cam,
                        res,
                        res,
                        Shading::Unlit,
                    )
                })
                .collect();
            let blend = feather(&mesh_mask, cfg.texture.sigma)?;
            fuse_texture(
                &charted,
                &map,
                &views,
                &blend,
                &t_orig,
                cfg.texture.exponent,
            )?
        } else {
            t_orig
        };
        texture_error = texture_error_inside(&charted, &map, &texture, &mesh_mask, case);
        (charted, texture)
    };
    timings.texture = clock.elapsed().as_secs_f64();

    // export
    let clock = Instant::now();
    files
        .0
        .extend(export_obj(&mesh, &texture, &out.join("edited"))?);
    let pr = cfg.run.preview_res;
    for (name, cam) in [
        ("preview_front.ppm", Camera::front(VIEW_EXTENT)),
        ("preview_orbit.ppm", Camera::orbit(35.0, 25.0, VIEW_EXTENT)),
    ] {
        let paint = if mesh.has_uvs() {
            Paint::Texture(&texture)
        } else {
            Paint::Uniform([0.7; 3])
        };
        let img = render_view(&mesh, &paint, &cam, pr, pr, Shading::Headlight);
        let p = out.join(name);
        write_ppm(&p, pr, pr, &img.colors)?;
        files.0.push(p);
    }
    timings.export = clock.elapsed().as_secs_f64();

    let metrics = CaseMetrics {
        id: case.id.clone(),
        kind: Some(case.kind),
        ok: true,
        error: None,
        silhouette_iou: iou(&sil, &target_sil),
        source_silhouette_iou: iou(src_cond.values(), &target_sil),
        preservation_iou: occupancy_iou(&grid, &src_latent.to_grid(GRID_RES), Some(&mesh_mask))?,
        chamfer: chamfer.is_finite().then_some(chamfer),
        final_energy: bce_energy(&render_silhouette(&edited, fe_cfg.kappa)?, &target_sil)?,
        texture_error,
    };
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    files.put(out.join("metrics.json"), text)?;
    let text = serde_json::to_string_pretty(&timings).expect("timings serialize") + "\n";
    std::fs::write(out.join("timings.json"), text)
        .map_err(|e| Error::io(out.join("timings.json"), e))?;
    Ok(CaseOutput {
        metrics,
        timings,
        latent: edited,
        grid,
        mesh,
        files: files.0,
    })
}

/// Mean absolute RGB error against the target appearance over texels whose
/// surface point lies inside the edit mask.
fn texture_error_inside(
    mesh: &TriMesh,
    map: &TexelMap,
    texture: &UvTexture,
    mask: &EditMask,
    case: &EditCase,
) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for idx in 0..map.owners.len() {
        let Some(p) = map.point(mesh, idx) else {
            continue;
        };
        if mask.sample(p) <= 0.0 {
            continue;
        }
        let truth = color_near(&case.target, &case.target_palette, p);
        sum += (0..3)
            .map(|a| (texture.colors[idx][a] - truth[a]).abs())
            .sum::<f64>()
            / 3.0;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}
