//! Stage drivers: dataset generation and multi-case edit runs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::Config;
use super::data::{generate_cases, read_case, write_case, EditCase};
use super::edit::{run_case, CaseTimings, Models};
use super::manifest::write_manifest;
use super::metrics::{evaluate, report_json, write_case_list, MetricsReport};
use crate::error::{Error, Result};

/// Write `count` cases into `out/<id>/` plus a manifest.
pub fn gen_data(count: usize, seed: u64, out: &Path) -> Result<Vec<EditCase>> {
    let cases = generate_cases(count, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for c in &cases {
        write_case(c, &out.join(&c.id))?;
    }
    write_manifest(out)?;
    Ok(cases)
}

/// Cases from a single case directory or from every case directory below
/// `dir`, in name order.
pub fn load_cases(dir: &Path) -> Result<Vec<EditCase>> {
    if dir.join("case.json").is_file() {
        return Ok(vec![read_case(dir)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("case.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!(
            "no cases found in {}",
            dir.display()
        )));
    }
    dirs.iter().map(|d| read_case(d)).collect()
}

/// Edit every case into `out/<id>/` on `cfg.run.workers` threads, then fold
/// the rows into `report.json` and hash the run directory. A failing case is
/// recorded in its `error.txt` and reported as a failed row.
pub fn run_edits(
    cases: &[EditCase],
    models: &Models,
    cfg: &Config,
    out: &Path,
) -> Result<MetricsReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    write_case_list(out, &ids)?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.run.workers)))?;
    let timings: Vec<(String, Option<CaseTimings>)> = pool.install(|| {
        cases
            .par_iter()
            .map(|c| {
                let dir = out.join(&c.id);
                match run_case(c, models, cfg, &dir) {
                    Ok(o) => (c.id.clone(), Some(o.timings)),
                    Err(e) => {
                        let _ = std::fs::create_dir_all(&dir);
                        let _ = std::fs::write(dir.join("error.txt"), format!("{e}\n"));
                        (c.id.clone(), None)
                    }
                }
            })
            .collect()
    });

    let report = evaluate(out)?;
    let p = out.join("report.json");
    std::fs::write(&p, report_json(&report)).map_err(|e| Error::io(&p, e))?;
    let p = out.join("timings.json");
    let text = serde_json::to_string_pretty(&timings).expect("timings serialize") + "\n";
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    write_manifest(out)?;
    Ok(report)
}
