//! Wavefront OBJ with the `v x y z r g b` vertex-color extension.

use std::fmt::Write as _;
use std::path::Path;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::geom::Vec3;

fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, line, format!("bad number {tok:?}")))
}

/// Resolves a 1-based (or negative, relative) OBJ index.
fn parse_index(tok: &str, count: usize, path: &Path, line: usize) -> Result<usize> {
    let i: i64 = tok
        .parse()
        .map_err(|_| Error::parse(path, line, format!("bad index {tok:?}")))?;
    let resolved = if i > 0 { i - 1 } else { count as i64 + i };
    if i == 0 || resolved < 0 || resolved >= count as i64 {
        return Err(Error::parse(path, line, format!("index {i} out of range (have {count})")));
    }
    Ok(resolved as usize)
}

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut colors: Vec<Vec3> = Vec::new();
    let mut normals: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    // set when a face corner's normal index differs from its vertex index
    let mut normals_per_vertex = true;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        let Some(tag) = toks.next() else { continue };
        let rest: Vec<&str> = toks.collect();
        match tag {
            "v" => {
                let nums = rest
                    .iter()
                    .map(|t| parse_f64(t, path, line_no))
                    .collect::<Result<Vec<_>>>()?;
                match nums.len() {
                    3 | 4 => {}
                    6 | 7 => colors.push([nums[3], nums[4], nums[5]]),
                    n => {
                        return Err(Error::parse(path, line_no, format!("vertex with {n} values")))
                    }
                }
                vertices.push([nums[0], nums[1], nums[2]]);
            }
            "vn" => {
                if rest.len() != 3 {
                    return Err(Error::parse(path, line_no, "normal needs 3 values"));
                }
                let n = rest
                    .iter()
                    .map(|t| parse_f64(t, path, line_no))
                    .collect::<Result<Vec<_>>>()?;
                normals.push([n[0], n[1], n[2]]);
            }
            "f" => {
                if rest.len() < 3 {
                    return Err(Error::parse(path, line_no, "face needs at least 3 corners"));
                }
                let mut corners = Vec::with_capacity(rest.len());
                for corner in &rest {
                    let mut parts = corner.split('/');
                    let v = parse_index(parts.next().unwrap_or(""), vertices.len(), path, line_no)?;
                    let _texture = parts.next();
                    match parts.next() {
                        Some(n) if !n.is_empty() => {
                            let n = parse_index(n, normals.len(), path, line_no)?;
                            normals_per_vertex &= n == v;
                        }
                        _ => normals_per_vertex = false,
                    }
                    corners.push(v as u32);
                }
                for i in 1..corners.len() - 1 {
                    faces.push([corners[0], corners[i], corners[i + 1]]);
                }
            }
            "vt" | "o" | "g" | "s" | "usemtl" | "mtllib" | "l" | "p" => {}
            other => {
                return Err(Error::parse(path, line_no, format!("unknown statement {other:?}")))
            }
        }
    }
    if !colors.is_empty() && colors.len() != vertices.len() {
        return Err(Error::parse(
            path,
            0,
            format!("{} of {} vertices carry colors", colors.len(), vertices.len()),
        ));
    }
    let mut mesh = TriMesh {
        vertices,
        faces,
        colors: (!colors.is_empty()).then_some(colors),
        normals: Vec::new(),
    };
    let dropped = mesh.remove_degenerate_faces();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} degenerate faces", path.display());
    }
    let usable = normals_per_vertex
        && normals.len() == mesh.vertices.len()
        && normals.iter().all(|n| (crate::geom::norm(*n) - 1.0).abs() < 1e-4);
    if usable {
        mesh.normals = normals;
    } else {
        mesh.compute_vertex_normals();
    }
    Ok(mesh)
}

/// Writes positions, colors and normals with six decimals; faces reference
/// the normal with the same index as the vertex.
pub fn save_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    let mut s = String::with_capacity(64 * (mesh.vertices.len() + mesh.faces.len()));
    for (i, v) in mesh.vertices.iter().enumerate() {
        let _ = write!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
        if let Some(c) = &mesh.colors {
            let _ = write!(s, " {:.6} {:.6} {:.6}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    let with_normals = mesh.normals.len() == mesh.vertices.len();
    if with_normals {
        for n in &mesh.normals {
            let _ = writeln!(s, "vn {:.6} {:.6} {:.6}", n[0], n[1], n[2]);
        }
    }
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| i + 1);
        if with_normals {
            let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
