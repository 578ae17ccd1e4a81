use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use voxedit_core::grid::VoxelGrid;
use voxedit_core::mesh::{self, Camera, Paint, Shading, UvTexture};
use voxedit_core::pipeline::edit::VIEW_EXTENT;
use voxedit_core::pipeline::training::split_heldout;
use voxedit_core::pipeline::{self, Config, Models, Which};

#[derive(Parser)]
#[command(
    name = "voxedit",
    version,
    about = "Guided flow-matching voxel editing benchmark"
)]
struct Cli {
    /// Sectioned key = value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural edit cases.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the structure and/or appearance flow model.
    Train {
        /// Directory of generated cases.
        #[arg(long)]
        data: PathBuf,
        /// Separate held-out cases; otherwise a fraction of --data is held out.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = WhichArg::Both)]
        which: WhichArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the edit pipeline over one case or a dataset.
    Edit(EditArgs),
    /// Aggregate the metrics of an edit run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Render a VOXGRID or OBJ file to a PPM image.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        azimuth: f64,
        #[arg(long, default_value_t = 20.0)]
        elevation: f64,
        #[arg(long, default_value_t = 256)]
        res: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Structure,
    Appearance,
    Both,
}

#[derive(Args)]
struct EditArgs {
    /// A case directory or a directory of cases.
    #[arg(long)]
    data: PathBuf,
    /// Directory holding structure.ckpt and appearance.ckpt.
    #[arg(long, required_unless_present = "oracle")]
    checkpoints: Option<PathBuf>,
    /// Use closed-form point-mass fields instead of trained models.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampling steps of both the structure edit and the repaint.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_tgt: Option<f64>,
    #[arg(long)]
    n_avg: Option<usize>,
    #[arg(long)]
    no_guidance: bool,
    #[arg(long)]
    no_texture: bool,
    #[arg(long)]
    workers: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { count, seed, out } => {
            if let Some(n) = count {
                cfg.data.count = n;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let cases = pipeline::gen_data(cfg.data.count, cfg.data.seed, &out)?;
            println!("wrote {} cases to {}", cases.len(), out.display());
        }
        Command::Train {
            data,
            heldout,
            which,
            steps,
            seed,
            out,
        } => {
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let all = pipeline::load_cases(&data)?;
            let extra = heldout.as_deref().map(pipeline::load_cases).transpose()?;
            let (train_cases, held) = match &extra {
                Some(h) => (&all[..], &h[..]),
                None => split_heldout(&all, cfg.data.heldout_fraction),
            };
            let kinds: &[Which] = match which {
                WhichArg::Structure => &[Which::Structure],
                WhichArg::Appearance => &[Which::Appearance],
                WhichArg::Both => &[Which::Structure, Which::Appearance],
            };
            for &w in kinds {
                let every = (cfg.train.steps / 10).max(1);
                let (summary, _) =
                    pipeline::train_to_dir(w, train_cases, held, &cfg, &out, |step, loss| {
                        if step % every == 0 {
                            eprintln!("{w:?} step {step}: loss {loss:.3}");
                        }
                    })?;
                println!(
                    "{:?}: held-out loss {:.3} -> {:.3} ({:.1}% lower)",
                    w,
                    summary.initial_heldout,
                    summary.final_heldout,
                    100.0 * summary.heldout_drop
                );
            }
            pipeline::manifest::write_manifest(&out)?;
        }
        Command::Edit(a) => {
            if let Some(s) = a.seed {
                cfg.flowedit.seed = s;
                cfg.repaint.seed = s;
            }
            if let Some(n) = a.steps {
                cfg.flowedit.steps = n;
                cfg.repaint.steps = n;
            }
            if let Some(s) = a.cfg_tgt {
                cfg.flowedit.cfg_tgt = s;
            }
            if let Some(n) = a.n_avg {
                cfg.flowedit.n_avg = n;
            }
            if let Some(w) = a.workers {
                cfg.run.workers = w;
            }
            if a.no_guidance {
                cfg.flowedit.guidance_enabled = false;
            }
            if a.no_texture {
                cfg.texture.enabled = false;
            }
            cfg.validate()?;
            let models = match (&a.checkpoints, a.oracle) {
                (_, true) => Models::Oracle,
                (Some(dir), false) => Models::load(dir)?,
                (None, false) => bail!("--checkpoints is required unless --oracle is given"),
            };
            let cases = pipeline::load_cases(&a.data)?;
            let report = pipeline::run_edits(&cases, &models, &cfg, &a.out)?;
            print_summary(&report);
        }
        Command::Eval { run } => {
            let report = pipeline::evaluate(&run)?;
            let p = run.join("report.json");
            std::fs::write(&p, pipeline::metrics::report_json(&report))
                .with_context(|| p.display().to_string())?;
            print_summary(&report);
        }
        Command::Render {
            input,
            out,
            azimuth,
            elevation,
            res,
        } => {
            render(&input, &out, azimuth, elevation, res)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn print_summary(r: &pipeline::MetricsReport) {
    let m = &r.means;
    println!("cases: {} completed, {} failed", r.completed, r.failed);
    println!(
        "silhouette IoU   {:.4} (source {:.4})",
        m.silhouette_iou, m.source_silhouette_iou
    );
    println!("preservation IoU {:.4}", m.preservation_iou);
    match m.chamfer {
        Some(c) => println!("chamfer          {c:.5}"),
        None => println!("chamfer          n/a"),
    }
    println!("final E_sil      {:.4}", m.final_energy);
    for c in r.cases.iter().filter(|c| !c.ok) {
        println!(
            "failed {}: {}",
            c.id,
            c.error.as_deref().unwrap_or("unknown error")
        );
    }
}

fn render(input: &Path, out: &Path, azimuth: f64, elevation: f64, res: usize) -> Result<()> {
    if res == 0 {
        bail!("--res must be positive");
    }
    let cam = Camera::orbit(azimuth, elevation, VIEW_EXTENT);
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
    let img = match ext {
        "voxgrid" => {
            let grid = VoxelGrid::read(input)?;
            mesh::render_grid(&grid, mesh::DEFAULT_ISO, [0.7, 0.7, 0.7], &cam, res, res)
        }
        "obj" => {
            let m = mesh::read_obj(input)?;
            let tex_path = input.with_extension("ppm");
            let texture = if m.has_uvs() && tex_path.is_file() {
                let (w, h, colors) = mesh::read_ppm(&tex_path)?;
                if w != h {
                    bail!("{}: texture is not square", tex_path.display());
                }
                Some(UvTexture {
                    size: w,
                    valid: vec![true; colors.len()],
                    colors,
                })
            } else {
                None
            };
            let paint = match &texture {
                Some(t) => Paint::Texture(t),
                None => Paint::Uniform([0.7, 0.7, 0.7]),
            };
            mesh::render_view(&m, &paint, &cam, res, res, Shading::Headlight)
        }
        _ => bail!("{}: expected a .voxgrid or .obj file", input.display()),
    };
    mesh::write_ppm(out, res, res, &img.colors)?;
    Ok(())
}
