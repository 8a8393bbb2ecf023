//! Perspective z-buffer rasterizer for ground-truth views and prior normal maps.

use super::TriMesh;
use crate::camera::{Camera, RigConfig};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::image::Image;
use crate::par;

const NEAR: f64 = 1e-3;
const BAND: usize = 8;
/// Samples per pixel side for color rasterization (box filter).
pub const RGB_SUPERSAMPLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterMode {
    /// Vertex colors on a white background.
    Rgb,
    /// World-space normals encoded as `(n + 1) / 2` on a zero background.
    Normal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterOutput {
    pub image: Image,
    /// Covered fraction of each pixel (0 or 1 for normal maps).
    pub mask: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    /// Encoded normals, exactly 0 outside the mask.
    pub normals: Image,
    pub mask: Image,
}

impl NormalMap {
    /// Unit world normal at pixel `(x, y)`, `None` outside the mask.
    pub fn decode(&self, x: usize, y: usize) -> Option<Vec3> {
        if self.mask.get(0, y, x) == 0.0 {
            return None;
        }
        let e = [0, 1, 2].map(|c| 2.0 * self.normals.get(c, y, x) as f64 - 1.0);
        geom::normalize(e)
    }
}

struct ScreenTri {
    face: u32,
    p: [[f64; 2]; 3],
    inv_z: [f64; 3],
    /// Signed doubled area in pixel space.
    area: f64,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

#[derive(Clone, Copy)]
struct Hit {
    depth: f64,
    face: u32,
    bary: [f64; 3],
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn setup(mesh: &TriMesh, camera: &Camera, ss: usize) -> Vec<ScreenTri> {
    let k = ss as f64;
    let (fx, fy) = camera.focal();
    let (cx, cy) = camera.principal_point();
    let (fx, fy, cx, cy) = (fx * k, fy * k, cx * k, cy * k);
    let view: Vec<Vec3> = mesh.vertices.iter().map(|v| camera.world_to_camera(*v)).collect();
    let (w, h) = ((camera.width * ss) as f64, (camera.height * ss) as f64);
    mesh.faces
        .iter()
        .enumerate()
        .filter_map(|(fi, f)| {
            let c = f.map(|i| view[i as usize]);
            if c.iter().any(|v| v[2] <= NEAR) {
                return None;
            }
            let p = c.map(|v| [fx * v[0] / v[2] + cx, fy * v[1] / v[2] + cy]);
            let area = edge(p[0], p[1], p[2]);
            if area.abs() < 1e-12 {
                return None;
            }
            let xmin = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
            let xmax = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
            let ymin = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
            let ymax = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
            // pixel centers at +0.5 inside the box
            let x0 = (xmin - 0.5).ceil().max(0.0);
            let x1 = (xmax - 0.5).floor().min(w - 1.0);
            let y0 = (ymin - 0.5).ceil().max(0.0);
            let y1 = (ymax - 0.5).floor().min(h - 1.0);
            if x0 > x1 || y0 > y1 {
                return None;
            }
            Some(ScreenTri {
                face: fi as u32,
                p,
                inv_z: c.map(|v| 1.0 / v[2]),
                area,
                x0: x0 as usize,
                x1: x1 as usize,
                y0: y0 as usize,
                y1: y1 as usize,
            })
        })
        .collect()
}

/// Nearest hit per sample with perspective-correct barycentrics, on a grid
/// `ss` times finer than the camera's pixels.
fn zbuffer(mesh: &TriMesh, camera: &Camera, ss: usize) -> Vec<Option<Hit>> {
    let tris = setup(mesh, camera, ss);
    let w = camera.width * ss;
    let h = camera.height * ss;
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); h.div_ceil(BAND)];
    for (i, t) in tris.iter().enumerate() {
        for bin in &mut bins[t.y0 / BAND..=t.y1 / BAND] {
            bin.push(i as u32);
        }
    }
    let mut hits: Vec<Option<Hit>> = vec![None; w * h];
    par::for_each_chunk_mut(&mut hits, BAND * w, |band, rows| {
        let row0 = band * BAND;
        let row1 = row0 + rows.len() / w;
        for t in bins[band].iter().map(|&i| &tris[i as usize]) {
            for y in t.y0.max(row0)..=t.y1.min(row1 - 1) {
                for x in t.x0..=t.x1 {
                    let p = [x as f64 + 0.5, y as f64 + 0.5];
                    let l = [
                        edge(t.p[1], t.p[2], p) / t.area,
                        edge(t.p[2], t.p[0], p) / t.area,
                        edge(t.p[0], t.p[1], p) / t.area,
                    ];
                    if l.iter().any(|&v| v < 0.0) {
                        continue;
                    }
                    let wz = [l[0] * t.inv_z[0], l[1] * t.inv_z[1], l[2] * t.inv_z[2]];
                    let s = wz[0] + wz[1] + wz[2];
                    let depth = 1.0 / s;
                    let slot = &mut rows[(y - row0) * w + x];
                    if slot.is_none_or(|h| depth < h.depth) {
                        *slot = Some(Hit {
                            depth,
                            face: t.face,
                            bary: wz.map(|v| v / s),
                        });
                    }
                }
            }
        }
    });
    hits
}

fn interpolate(values: &[Vec3], face: [u32; 3], b: [f64; 3]) -> Vec3 {
    let mut out = [0.0; 3];
    for k in 0..3 {
        out = geom::add(out, geom::scale(values[face[k] as usize], b[k]));
    }
    out
}

/// Renders colors or encoded world normals with a depth test; no back-face
/// culling. Triangles crossing the near plane are skipped. Colors are
/// box-filtered over [`RGB_SUPERSAMPLE`]² samples and the mask holds the
/// covered fraction; normals take one sample at the pixel center.
pub fn raster_mesh(mesh: &TriMesh, camera: &Camera, mode: RasterMode) -> Result<RasterOutput> {
    let attrs: &[Vec3] = match mode {
        RasterMode::Rgb => mesh
            .colors
            .as_deref()
            .ok_or_else(|| Error::config("rgb rasterization needs vertex colors"))?,
        RasterMode::Normal => {
            if mesh.normals.len() != mesh.vertices.len() {
                return Err(Error::config("normal rasterization needs vertex normals"));
            }
            &mesh.normals
        }
    };
    let (w, h) = (camera.width, camera.height);
    let (ss, bg) = match mode {
        RasterMode::Rgb => (RGB_SUPERSAMPLE, 1.0),
        RasterMode::Normal => (1, 0.0),
    };
    let hits = zbuffer(mesh, camera, ss);
    let mut image = Image::new(3, h, w);
    let mut mask = Image::new(1, h, w);
    let inv = 1.0 / (ss * ss) as f64;
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut covered) = ([0.0; 3], 0.0);
            for sy in 0..ss {
                for sx in 0..ss {
                    let value = match hits[(y * ss + sy) * w * ss + x * ss + sx] {
                        None => [bg; 3],
                        Some(hit) => {
                            covered += inv;
                            let v = interpolate(attrs, mesh.faces[hit.face as usize], hit.bary);
                            match mode {
                                RasterMode::Rgb => v.map(|c| c.clamp(0.0, 1.0)),
                                RasterMode::Normal => geom::normalize(v)
                                    .unwrap_or(mesh_face_normal(mesh, hit.face))
                                    .map(|c| 0.5 * (c + 1.0)),
                            }
                        }
                    };
                    acc = geom::add(acc, geom::scale(value, inv));
                }
            }
            for c in 0..3 {
                image.set(c, y, x, acc[c] as f32);
            }
            mask.set(0, y, x, covered as f32);
        }
    }
    Ok(RasterOutput { image, mask })
}

fn mesh_face_normal(mesh: &TriMesh, face: u32) -> Vec3 {
    let [a, b, c] = mesh.triangle(face as usize);
    geom::normalize(geom::triangle_cross(a, b, c)).unwrap_or([0.0, 1.0, 0.0])
}

/// Normal maps from `base + {0, 180, 90, 270}` degrees azimuth at elevation 0:
/// front, back, left and right relative to the base view.
pub fn normal_maps_around(
    mesh: &TriMesh,
    rig: &RigConfig,
    base_azimuth_deg: f64,
    res: usize,
) -> Result<[NormalMap; 4]> {
    let offsets = [0.0, 180.0, 90.0, 270.0];
    let maps = offsets
        .iter()
        .map(|off| {
            let cam = rig.camera((base_azimuth_deg + off) % 360.0, 0.0, res)?;
            let r = raster_mesh(mesh, &cam, RasterMode::Normal)?;
            Ok(NormalMap {
                normals: r.image,
                mask: r.mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(maps.try_into().expect("four maps"))
}

/// The four orthogonal prior normal maps at half the RGB input resolution.
pub fn render_orthogonal_normalmaps(
    mesh: &TriMesh,
    rig: &RigConfig,
    input_res: usize,
) -> Result<[NormalMap; 4]> {
    if input_res < 2 || input_res % 2 != 0 {
        return Err(Error::config(format!("input resolution {input_res} must be even")));
    }
    normal_maps_around(mesh, rig, 0.0, input_res / 2)
}
