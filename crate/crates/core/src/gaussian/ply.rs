//! Binary little-endian PLY in the layout common Gaussian-splat viewers read:
//! log scales, logit opacity, degree-0 SH color. Direction sets store their
//! unit vector in `nx ny nz`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureKind, Gaussian, GaussianSet};
use crate::autodiff::Real;
use crate::error::{Error, Result};

const SH_C0: f64 = 0.282_094_791_773_878_14;
const OPACITY_EPS: f64 = 1e-6;

const PROPS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
    "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

fn kind_name(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Color => "color",
        FeatureKind::Direction => "direction",
    }
}

pub fn write_ply<T: Real>(set: &GaussianSet<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment feature_kind {}\nelement vertex {}\n",
        kind_name(set.kind),
        set.len()
    );
    for p in PROPS {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    let mut body = Vec::with_capacity(set.len() * PROPS.len() * 4);
    for g in &set.gaussians {
        let f = |v: T| v.as_f64();
        let (normal, dc) = match set.kind {
            FeatureKind::Color => ([0.0; 3], g.feature.map(|c| (f(c) - 0.5) / SH_C0)),
            FeatureKind::Direction => (g.feature.map(f), [0.0; 3]),
        };
        let a = f(g.opacity).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let values = [
            f(g.position[0]),
            f(g.position[1]),
            f(g.position[2]),
            normal[0],
            normal[1],
            normal[2],
            dc[0],
            dc[1],
            dc[2],
            (a / (1.0 - a)).ln(),
            f(g.scale[0]).ln(),
            f(g.scale[1]).ln(),
            f(g.scale[2]).ln(),
            f(g.rotation[0]),
            f(g.rotation[1]),
            f(g.rotation[2]),
            f(g.rotation[3]),
        ];
        for v in values {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn scalar_size(ty: &str) -> Option<usize> {
    match ty {
        "char" | "uchar" | "int8" | "uint8" => Some(1),
        "short" | "ushort" | "int16" | "uint16" => Some(2),
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => Some(4),
        "double" | "float64" => Some(8),
        _ => None,
    }
}

fn decode(ty: &str, b: &[u8]) -> f64 {
    match ty {
        "char" | "int8" => b[0] as i8 as f64,
        "uchar" | "uint8" => b[0] as f64,
        "short" | "int16" => i16::from_le_bytes([b[0], b[1]]) as f64,
        "ushort" | "uint16" => u16::from_le_bytes([b[0], b[1]]) as f64,
        "int" | "int32" => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        "uint" | "uint32" => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        "float" | "float32" => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        _ => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
    }
}

/// Reads a set written by [`write_ply`] or by common splat tools. Properties
/// outside the degree-0 layout are rejected.
pub fn read_ply<T: Real>(path: &Path) -> Result<GaussianSet<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut kind = FeatureKind::Color;
    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut line_no = 0;
    let mut in_vertex = false;
    loop {
        let mut line = String::new();
        line_no += 1;
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::parse(path, line_no, "missing end_header"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] if line_no == 1 => {}
            _ if line_no == 1 => return Err(Error::parse(path, 1, "not a PLY file")),
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => {
                return Err(Error::parse(path, line_no, format!("unsupported format {other}")))
            }
            ["comment", "feature_kind", k] => {
                kind = match *k {
                    "color" => FeatureKind::Color,
                    "direction" => FeatureKind::Direction,
                    _ => return Err(Error::parse(path, line_no, format!("unknown feature kind {k}"))),
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                if count.is_some() && in_vertex {
                    return Err(Error::parse(path, line_no, "vertex must be the only element"));
                }
                in_vertex = *name == "vertex";
                if !in_vertex {
                    return Err(Error::parse(path, line_no, format!("unsupported element {name}")));
                }
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::parse(path, line_no, "bad element count"))?,
                );
            }
            ["property", ty, name] => {
                if scalar_size(ty).is_none() {
                    return Err(Error::parse(path, line_no, format!("unsupported type {ty}")));
                }
                props.push((ty.to_string(), name.to_string()));
            }
            ["end_header"] => break,
            [] => {}
            _ => return Err(Error::parse(path, line_no, format!("unexpected header line {:?}", line.trim()))),
        }
    }
    let count = count.ok_or_else(|| Error::parse(path, line_no, "no vertex element"))?;
    let unknown: Vec<&str> = props
        .iter()
        .map(|(_, n)| n.as_str())
        .filter(|n| !PROPS.contains(n))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::parse(
            path,
            line_no,
            format!("unknown vertex properties: {}", unknown.join(", ")),
        ));
    }
    let find = |name: &str| props.iter().position(|(_, n)| n == name);
    let idx: Vec<Option<usize>> = PROPS.iter().map(|p| find(p)).collect();
    for (i, p) in PROPS.iter().enumerate() {
        let needed = match kind {
            FeatureKind::Color => !(3..6).contains(&i),
            FeatureKind::Direction => !(6..9).contains(&i),
        };
        if needed && idx[i].is_none() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("missing property {p}"),
            });
        }
    }
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |o, (ty, _)| {
            let cur = *o;
            *o += scalar_size(ty).expect("checked");
            Some(cur)
        })
        .collect();
    let stride: usize = props.iter().map(|(ty, _)| scalar_size(ty).expect("checked")).sum();
    let mut body = vec![0u8; stride * count];
    r.read_exact(&mut body).map_err(|e| Error::io(path, e))?;
    let mut gaussians = Vec::with_capacity(count);
    for rec in body.chunks(stride) {
        let v = |i: usize| {
            idx[i].map_or(0.0, |k| decode(&props[k].0, &rec[offsets[k]..]))
        };
        let feature = match kind {
            FeatureKind::Color => [6, 7, 8].map(|i| T::lit(0.5 + SH_C0 * v(i))),
            FeatureKind::Direction => [3, 4, 5].map(|i| T::lit(v(i))),
        };
        let logit = v(9);
        gaussians.push(Gaussian {
            position: [0, 1, 2].map(|i| T::lit(v(i))),
            scale: [10, 11, 12].map(|i| T::lit(v(i).exp())),
            rotation: [13, 14, 15, 16].map(|i| T::lit(v(i))),
            opacity: T::lit(1.0 / (1.0 + (-logit).exp())),
            feature,
        });
    }
    Ok(GaussianSet { kind, gaussians })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [FeatureKind::Color, FeatureKind::Direction] {
            let feature = match kind {
                FeatureKind::Color => [0.2, 0.9, 0.5],
                FeatureKind::Direction => [0.6, 0.0, 0.8],
            };
            let set = GaussianSet {
                kind,
                gaussians: vec![
                    Gaussian {
                        position: [0.1, -0.2, 0.3],
                        scale: [0.01, 0.02, 0.5],
                        rotation: [0.5, 0.5, 0.5, 0.5],
                        opacity: 0.75,
                        feature,
                    };
                    3
                ],
            };
            let path = dir.path().join("s.ply");
            write_ply(&set, &path).unwrap();
            let back: GaussianSet<f64> = read_ply(&path).unwrap();
            assert_eq!(back.kind, kind);
            assert_eq!(back.len(), 3);
            let (a, b) = (set.to_flat(), back.to_flat());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn empty_set_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ply");
        write_ply(&GaussianSet::<f32>::new(FeatureKind::Color), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"ply\nformat binary_little_endian 1.0"));
        assert!(read_ply::<f32>(&path).unwrap().is_empty());
    }

    #[test]
    fn unknown_properties_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.ply");
        let mut header = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 0\n");
        for p in PROPS.iter().chain(&["f_rest_0", "weird"]) {
            header.push_str(&format!("property float {p}\n"));
        }
        header.push_str("end_header\n");
        std::fs::write(&path, header).unwrap();
        match read_ply::<f64>(&path) {
            Err(Error::Parse { message, .. }) => {
                assert!(message.contains("f_rest_0") && message.contains("weird"), "{message}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_header_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        std::fs::write(&path, "ply\nformat binary_little_endian 1.0\nelement vertex x\nend_header\n").unwrap();
        assert!(matches!(read_ply::<f64>(&path), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn rejects_ascii() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        std::fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n").unwrap();
        assert!(matches!(read_ply::<f64>(&path), Err(Error::Parse { .. })));
    }
}
