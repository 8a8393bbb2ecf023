//! Marching cubes with a case table derived from the cube faces.
//!
//! On every cube face the inside corners form runs along the face cycle
//! (walked counter-clockwise as seen from outside the cube). Each run yields
//! one segment from the crossing where the walk enters it to the crossing
//! where it leaves; diagonal corner pairs count as two runs. Both cubes
//! sharing a face make the same choice, so the segments chain into closed
//! loops and the surface is watertight, oriented with normals pointing
//! towards lower values.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::par;

/// Samples on a regular lattice, x fastest.
#[derive(Clone, Debug)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    /// Evaluates `f` at every lattice point.
    pub fn sample<F>(dims: [usize; 3], origin: Vec3, spacing: f64, f: F) -> Self
    where
        F: Fn(Vec3) -> f64 + Sync + Send,
    {
        let [nx, ny, _] = dims;
        let slab = nx * ny;
        let slabs = par::map_range(dims[2], |k| {
            let mut out = Vec::with_capacity(slab);
            for j in 0..ny {
                for i in 0..nx {
                    out.push(f([
                        origin[0] + i as f64 * spacing,
                        origin[1] + j as f64 * spacing,
                        origin[2] + k as f64 * spacing,
                    ]));
                }
            }
            out
        });
        Self {
            dims,
            origin,
            spacing,
            values: slabs.concat(),
        }
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.dims[1] + j) * self.dims[0] + i]
    }
}

/// Corner `c` of a cell sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
fn cube_edges() -> [(u8, u8); 12] {
    let mut out = [(0u8, 0u8); 12];
    let mut n = 0;
    for a in 0u8..8 {
        for bit in [1u8, 2, 4] {
            if a & bit == 0 {
                out[n] = (a, a | bit);
                n += 1;
            }
        }
    }
    out
}

fn edge_index(edges: &[(u8, u8); 12], a: u8, b: u8) -> u8 {
    let key = (a.min(b), a.max(b));
    edges.iter().position(|e| *e == key).expect("cube edge") as u8
}

/// Corner cycles of the six faces, counter-clockwise seen from outside.
fn face_cycles() -> [[u8; 4]; 6] {
    let mut out = [[0u8; 4]; 6];
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2u8 {
            let corner = |u: u8, v: u8| (side << axis) | (u << b) | (v << c);
            // walking +b then +c turns around +axis
            let mut cyc = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                cyc.reverse();
            }
            out[axis * 2 + side as usize] = cyc;
        }
    }
    out
}

/// Triangles (as cube-edge triples) for each of the 256 inside-corner masks.
fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let edges = cube_edges();
        let faces = face_cycles();
        (0..256usize)
            .map(|mask| {
                let inside = |c: u8| mask & (1 << c) != 0;
                let mut next = [u8::MAX; 12];
                for cyc in &faces {
                    let mut entries = Vec::new();
                    let mut exits = Vec::new();
                    for i in 0..4 {
                        let (a, b) = (cyc[i], cyc[(i + 1) % 4]);
                        if !inside(a) && inside(b) {
                            entries.push((i, edge_index(&edges, a, b)));
                        } else if inside(a) && !inside(b) {
                            exits.push((i, edge_index(&edges, a, b)));
                        }
                    }
                    for &(pos, e) in &entries {
                        let exit = exits
                            .iter()
                            .min_by_key(|(p, _)| (p + 4 - pos) % 4)
                            .expect("every run is left again");
                        next[e as usize] = exit.1;
                    }
                }
                let mut seen = [false; 12];
                let mut tris = Vec::new();
                for start in 0..12u8 {
                    if next[start as usize] == u8::MAX || seen[start as usize] {
                        continue;
                    }
                    let mut lp = Vec::new();
                    let mut e = start;
                    while !seen[e as usize] {
                        seen[e as usize] = true;
                        lp.push(e);
                        e = next[e as usize];
                    }
                    for i in 1..lp.len() - 1 {
                        tris.push([lp[0], lp[i], lp[i + 1]]);
                    }
                }
                tris
            })
            .collect()
    })
}

/// Extracts the `iso` level set, inside being `value > iso`. The grid is
/// treated as surrounded by outside values, so the result is closed.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Result<TriMesh> {
    let [nx, ny, nz] = grid.dims;
    if nx < 2 || ny < 2 || nz < 2 || grid.values.len() != nx * ny * nz {
        return Err(Error::config(format!("bad scalar grid {:?}", grid.dims)));
    }
    let top = grid.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(top > iso) {
        return Err(Error::EmptyIsosurface { iso });
    }
    let pad = iso - (top - iso);
    // padded lattice: index p in 0..=n+1 maps to grid index p - 1
    let (px, py, pz) = (nx + 2, ny + 2, nz + 2);
    let value = |i: usize, j: usize, k: usize| -> f64 {
        if i == 0 || j == 0 || k == 0 || i > nx || j > ny || k > nz {
            pad
        } else {
            grid.at(i - 1, j - 1, k - 1)
        }
    };
    let table = case_table();
    let edges = cube_edges();
    let key = |i: usize, j: usize, k: usize, axis: usize| ((k * py + j) * px + i) * 3 + axis;
    let per_slab: Vec<Vec<[usize; 3]>> = par::map_range(pz - 1, |k| {
        let mut tris = Vec::new();
        for j in 0..py - 1 {
            for i in 0..px - 1 {
                let mut mask = 0usize;
                for c in 0..8 {
                    if value(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) > iso {
                        mask |= 1 << c;
                    }
                }
                for t in &table[mask] {
                    tris.push(t.map(|e| {
                        let (a, b) = edges[e as usize];
                        let axis = (a ^ b).trailing_zeros() as usize;
                        let a = a as usize;
                        key(i + (a & 1), j + ((a >> 1) & 1), k + ((a >> 2) & 1), axis)
                    }));
                }
            }
        }
        tris
    });
    let mut index: HashMap<usize, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for tris in per_slab {
        for t in tris {
            faces.push(t.map(|kk| {
                *index.entry(kk).or_insert_with(|| {
                    let axis = kk % 3;
                    let p = kk / 3;
                    let (i, j, k) = (p % px, (p / px) % py, p / (px * py));
                    let mut o = [i, j, k];
                    let v0 = value(i, j, k);
                    o[axis] += 1;
                    let v1 = value(o[0], o[1], o[2]);
                    let t = ((iso - v0) / (v1 - v0)).clamp(1e-6, 1.0 - 1e-6);
                    let mut pos = [0.0; 3];
                    for d in 0..3 {
                        let base = [i, j, k][d] as f64 - 1.0;
                        let step = if d == axis { t } else { 0.0 };
                        pos[d] = grid.origin[d] + (base + step) * grid.spacing;
                    }
                    vertices.push(pos);
                    (vertices.len() - 1) as u32
                })
            }));
        }
    }
    Ok(TriMesh::new(vertices, faces))
}
