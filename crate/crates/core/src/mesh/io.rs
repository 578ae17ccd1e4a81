//! OBJ + MTL + PPM export and a matching OBJ reader.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::atlas::UvTexture;
use super::TriMesh;
use crate::error::{Error, Result};

/// Binary (P6) PPM with 8-bit channels; colours are clamped to `[0,1]`.
pub fn encode_ppm(width: usize, height: usize, colors: &[[f64; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(colors.len() * 3);
    for c in colors {
        for &x in c {
            out.push((x.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, colors: &[[f64; 3]]) -> Result<()> {
    std::fs::write(path, encode_ppm(width, height, colors)).map_err(|e| Error::io(path, e))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let bad = |m: &str| Error::Parse(format!("PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 images are supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = &bytes[pos + 1..];
    if data.len() != w * h * 3 {
        return Err(bad("pixel data size does not match header"));
    }
    let colors = data
        .chunks(3)
        .map(|c| std::array::from_fn(|k| c[k] as f64 / 255.0))
        .collect();
    Ok((w, h, colors))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// OBJ text. With `material` set, `mtllib`/`usemtl` lines are emitted.
pub fn write_obj(mesh: &TriMesh, material: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(name) = material {
        let _ = writeln!(s, "mtllib {name}.mtl\nusemtl {name}");
    }
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2]);
    }
    for uv in &mesh.uvs {
        let _ = writeln!(s, "vt {:.9} {:.9}", uv[0], uv[1]);
    }
    for n in &mesh.normals {
        let _ = writeln!(s, "vn {:.9} {:.9} {:.9}", n[0], n[1], n[2]);
    }
    let with_uv = mesh.has_uvs();
    for (f, t) in mesh.triangles.iter().enumerate() {
        s.push('f');
        for c in 0..3 {
            let v = t[c] + 1;
            if with_uv {
                let _ = write!(s, " {v}/{}/{v}", 3 * f + c + 1);
            } else {
                let _ = write!(s, " {v}//{v}");
            }
        }
        s.push('\n');
    }
    s
}

/// Write `<prefix>.obj`, `<prefix>.mtl` and `<prefix>.ppm` (the texture);
/// returns the written paths.
pub fn export_obj(mesh: &TriMesh, texture: &UvTexture, prefix: &Path) -> Result<Vec<PathBuf>> {
    mesh.validate()?;
    let name = prefix
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("bad output prefix {}", prefix.display())))?;
    let with_ext = |ext: &str| prefix.with_file_name(format!("{name}.{ext}"));
    let (obj, mtl, ppm) = (with_ext("obj"), with_ext("mtl"), with_ext("ppm"));
    std::fs::write(&obj, write_obj(mesh, Some(name))).map_err(|e| Error::io(&obj, e))?;
    let material = format!("newmtl {name}\nKa 0 0 0\nKd 1 1 1\nKs 0 0 0\nmap_Kd {name}.ppm\n");
    std::fs::write(&mtl, material).map_err(|e| Error::io(&mtl, e))?;
    write_ppm(&ppm, texture.size, texture.size, &texture.colors)?;
    Ok(vec![obj, mtl, ppm])
}

/// Parse the subset of OBJ written by [`write_obj`]: triangles with
/// `v/vt/vn` or `v//vn` corners whose normal index equals the vertex index.
pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut mesh = TriMesh::default();
    let mut vts = Vec::new();
    let mut faces = Vec::new();
    let num = |t: Option<&str>, line: usize| -> Result<f64> {
        t.and_then(|x| x.parse().ok())
            .ok_or_else(|| Error::Parse(format!("OBJ line {line}: expected a number")))
    };
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => mesh.vertices.push([
                num(tok.next(), ln)?,
                num(tok.next(), ln)?,
                num(tok.next(), ln)?,
            ]),
            Some("vn") => mesh.normals.push([
                num(tok.next(), ln)?,
                num(tok.next(), ln)?,
                num(tok.next(), ln)?,
            ]),
            Some("vt") => vts.push([num(tok.next(), ln)?, num(tok.next(), ln)?]),
            Some("f") => {
                let corners: Vec<&str> = tok.collect();
                if corners.len() != 3 {
                    return Err(Error::Parse(format!(
                        "OBJ line {ln}: only triangles are supported"
                    )));
                }
                let mut tri = [0usize; 3];
                let mut uv = [None; 3];
                for (c, corner) in corners.iter().enumerate() {
                    let parts: Vec<&str> = corner.split('/').collect();
                    let idx = |s: &str| -> Result<usize> {
                        s.parse::<usize>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| Error::Parse(format!("OBJ line {ln}: bad index {s:?}")))
                    };
                    tri[c] = idx(parts[0])?;
                    if let Some(t) = parts.get(1).filter(|s| !s.is_empty()) {
                        uv[c] = Some(idx(t)?);
                    }
                }
                faces.push((tri, uv));
            }
            _ => {}
        }
    }
    let with_uv = !faces.is_empty() && faces.iter().all(|(_, uv)| uv.iter().all(Option::is_some));
    for (tri, uv) in faces {
        mesh.triangles.push(tri);
        if with_uv {
            for t in uv.into_iter().flatten() {
                let v = *vts
                    .get(t)
                    .ok_or_else(|| Error::Parse(format!("texture index {} out of range", t + 1)))?;
                mesh.uvs.push(v);
            }
        }
    }
    mesh.validate().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    parse_obj(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelGrid;
    use crate::mesh::{atlas_uv, marching_cubes};
    use crate::rng;
    use rand::Rng as _;

    fn triangle() -> TriMesh {
        atlas_uv(
            &TriMesh {
                vertices: vec![[0.1, 0.2, 0.3], [0.9, 0.2, 0.3], [0.1, 0.7, 0.3]],
                triangles: vec![[0, 1, 2]],
                normals: vec![[0.0, 0.0, -1.0]; 3],
                uvs: vec![],
            },
            8,
        )
        .unwrap()
    }

    fn count(text: &str, tag: &str) -> usize {
        text.lines()
            .filter(|l| l.split_whitespace().next() == Some(tag))
            .count()
    }

    #[test]
    fn one_triangle_counts() {
        let text = write_obj(&triangle(), Some("m"));
        assert_eq!(
            (
                count(&text, "v"),
                count(&text, "vt"),
                count(&text, "vn"),
                count(&text, "f")
            ),
            (3, 3, 3, 1)
        );
    }

    #[test]
    fn empty_mesh_is_valid_obj() {
        let text = write_obj(&TriMesh::default(), Some("m"));
        assert_eq!(count(&text, "f") + count(&text, "v"), 0);
        assert_eq!(parse_obj(&text).unwrap(), TriMesh::default());
    }

    #[test]
    fn roundtrip_keeps_mesh_data() {
        let mut r = rng::rng(2);
        let vals = (0..125).map(|_| r.random::<f64>()).collect();
        let m = atlas_uv(&marching_cubes(&VoxelGrid::new(5, vals).unwrap(), 0.5), 256).unwrap();
        let back = parse_obj(&write_obj(&m, None)).unwrap();
        assert_eq!(back.triangles, m.triangles);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 5e-10);
        assert!(back
            .vertices
            .iter()
            .zip(&m.vertices)
            .all(|(a, b)| close(a, b)));
        assert!(back
            .normals
            .iter()
            .zip(&m.normals)
            .all(|(a, b)| close(a, b)));
        assert!(back.uvs.iter().zip(&m.uvs).all(|(a, b)| close(a, b)));
        assert_eq!(back.uvs.len(), m.uvs.len());
    }

    #[test]
    fn export_writes_stable_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = triangle();
        let tex = UvTexture {
            size: 8,
            colors: vec![[0.25, 0.5, 1.0]; 64],
            valid: vec![true; 64],
        };
        let paths = export_obj(&m, &tex, &dir.path().join("asset")).unwrap();
        let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        export_obj(&m, &tex, &dir.path().join("asset")).unwrap();
        let second: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        let mtl = String::from_utf8(first[1].clone()).unwrap();
        assert!(mtl.contains("map_Kd asset.ppm"));
        let (w, h, px) = read_ppm(&paths[2]).unwrap();
        assert_eq!((w, h), (8, 8));
        assert!((px[0][1] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(read_obj(&paths[0]).unwrap().triangles, m.triangles);
        let err = export_obj(&m, &tex, &dir.path().join("missing/asset")).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
