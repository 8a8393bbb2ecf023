//! Triangle meshes: OBJ I/O, vertex normals, z-buffer rasterization,
//! isosurface extraction and the procedural humanoid generator.

mod humanoid;
mod marching;
mod obj;
mod raster;

pub use humanoid::{synth_humanoid, HumanoidParams, HumanoidPair};
pub use marching::{marching_cubes, ScalarGrid};
pub use obj::{load_obj, save_obj};
pub use raster::{
    normal_maps_around, raster_mesh, render_orthogonal_normalmaps, NormalMap, RasterMode,
    RasterOutput,
};

use std::collections::HashMap;

use crate::geom::{self, Vec3};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Per-vertex RGB in [0, 1].
    pub colors: Option<Vec<Vec3>>,
    /// Per-vertex unit normals; empty until computed.
    pub normals: Vec<Vec3>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Self {
        let mut m = Self {
            vertices,
            faces,
            colors: None,
            normals: Vec::new(),
        };
        m.compute_vertex_normals();
        m
    }

    pub fn with_colors(mut self, colors: Vec<Vec3>) -> Self {
        self.colors = Some(colors);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        geom::triangle_area(a, b, c)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume; positive for a closed mesh with outward faces.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                geom::dot(a, geom::cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }

    /// Area-weighted face-normal accumulation. Isolated vertices get +y.
    pub fn compute_vertex_normals(&mut self) {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            // |cross| = 2·area, so the raw cross product is area-weighted
            let n = geom::triangle_cross(a, b, c);
            for &i in f {
                acc[i as usize] = geom::add(acc[i as usize], n);
            }
        }
        let mut isolated = 0;
        self.normals = acc
            .into_iter()
            .map(|n| {
                geom::normalize(n).unwrap_or_else(|| {
                    isolated += 1;
                    [0.0, 1.0, 0.0]
                })
            })
            .collect();
        if isolated > 0 {
            log::warn!("{isolated} vertices without faces; normal set to +y");
        }
    }

    /// Reverses every face winding and negates the normals.
    pub fn flip(&mut self) {
        for f in &mut self.faces {
            f.swap(1, 2);
        }
        for n in &mut self.normals {
            *n = geom::scale(*n, -1.0);
        }
    }

    /// Drops faces with repeated indices or (near) zero area.
    pub fn remove_degenerate_faces(&mut self) -> usize {
        let before = self.faces.len();
        let verts = &self.vertices;
        self.faces.retain(|f| {
            f[0] != f[1]
                && f[1] != f[2]
                && f[0] != f[2]
                && geom::triangle_area(verts[f[0] as usize], verts[f[1] as usize], verts[f[2] as usize]) > 1e-14
        });
        before - self.faces.len()
    }

    /// Applies `p -> s·p + t` to every vertex.
    pub fn scale_translate(&mut self, s: f64, t: Vec3) {
        for v in &mut self.vertices {
            *v = geom::add(geom::scale(*v, s), t);
        }
    }

    /// Applies a rotation (row-major) to vertices and normals.
    pub fn rotate(&mut self, r: &[[f64; 3]; 3]) {
        for v in &mut self.vertices {
            *v = geom::mat_vec(r, *v);
        }
        for n in &mut self.normals {
            *n = geom::mat_vec(r, *n);
        }
    }

    /// Number of faces sharing each undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge shared by exactly two faces.
    pub fn is_edge_manifold(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// Keeps the connected component (through shared vertices) with the
    /// most faces, reindexing vertices.
    pub fn largest_component(&self) -> TriMesh {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for f in &self.faces {
            let a = find(&mut parent, f[0] as usize);
            for &v in &f[1..] {
                let b = find(&mut parent, v as usize);
                if a != b {
                    parent[b] = a;
                }
            }
        }
        let mut face_count: HashMap<usize, usize> = HashMap::new();
        for f in &self.faces {
            *face_count.entry(find(&mut parent, f[0] as usize)).or_insert(0) += 1;
        }
        // ties broken by the smallest root for determinism
        let Some(best) = face_count
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(r, _)| *r)
        else {
            return TriMesh::default();
        };
        let mut remap = vec![u32::MAX; n];
        let mut out = TriMesh::default();
        let mut colors = self.colors.as_ref().map(|_| Vec::new());
        for f in &self.faces {
            if find(&mut parent, f[0] as usize) != best {
                continue;
            }
            let mut nf = [0u32; 3];
            for (k, &v) in f.iter().enumerate() {
                let v = v as usize;
                if remap[v] == u32::MAX {
                    remap[v] = out.vertices.len() as u32;
                    out.vertices.push(self.vertices[v]);
                    if let Some(n) = self.normals.get(v) {
                        out.normals.push(*n);
                    }
                    if let (Some(dst), Some(src)) = (colors.as_mut(), self.colors.as_ref()) {
                        dst.push(src[v]);
                    }
                }
                nf[k] = remap[v];
            }
            out.faces.push(nf);
        }
        out.colors = colors;
        if out.normals.len() != out.vertices.len() {
            out.compute_vertex_normals();
        }
        out
    }

    /// Appends another mesh.
    pub fn append(&mut self, other: &TriMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| f.map(|i| i + off)));
        self.normals.extend_from_slice(&other.normals);
        match (&mut self.colors, &other.colors) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (a, _) => *a = None,
        }
    }
}

/// Unit icosphere with `subdivisions` rounds of 4-way splitting, outward faces.
pub fn icosphere(subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|v| geom::normalize(*v).expect("nonzero"))
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let m = geom::lerp(verts[a as usize], verts[b as usize], 0.5);
                verts.push(geom::normalize(m).expect("nonzero"));
                (verts.len() - 1) as u32
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh::new(vertices, faces)
}
