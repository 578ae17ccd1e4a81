//! Content hashes of every artifact a stage wrote.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Files that legitimately differ between identical reruns.
pub const UNHASHED: &[&str] = &[MANIFEST_FILE, "timings.json"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Relative path (with `/` separators) to SHA-256 of every file below
/// `dir`, skipping [`UNHASHED`] names.
pub fn scan(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    walk(dir, "", &mut out)?;
    Ok(out)
}

fn walk(dir: &Path, prefix: &str, out: &mut BTreeMap<String, String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path();
        let rel = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}/{name}")
        };
        if path.is_dir() {
            walk(&path, &rel, out)?;
        } else if !UNHASHED.contains(&name.as_str()) {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(())
}

/// Scan `dir` and write the result to `dir/manifest.json`.
pub fn write_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let files = scan(dir)?;
    let p = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&files).expect("manifest serializes") + "\n";
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(files)
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let p = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
}
