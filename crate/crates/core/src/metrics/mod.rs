//! Reconstruction metrics: surface sampling, Chamfer distances, f-score,
//! normal consistency, front/back perceptual comparison, and extraction of
//! a mesh from a Gaussian density field.

mod kdtree;

pub use kdtree::KdTree;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::camera::RigConfig;
use crate::error::{Error, Result};
use crate::gaussian::{gaussian_density, FeatureKind, GaussianSet};
use crate::geom::{self, Vec3};
use crate::loss::{perceptual_distance, Perceptual};
use crate::mesh::{marching_cubes, raster_mesh, RasterMode, ScalarGrid, TriMesh};
use crate::par;

/// World units are metres of a 1.8 m subject.
pub const CM_PER_UNIT: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointSample {
    pub position: Vec3,
    pub normal: Vec3,
    pub face: usize,
}

/// Area-weighted uniform samples with barycentric-interpolated normals.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<PointSample>> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::config("cannot sample a mesh with zero surface area"));
    }
    let vertex_normals = mesh.normals.len() == mesh.vertices.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let face = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let b = [1.0 - s, s * (1.0 - r2), s * r2];
        let [pa, pb, pc] = mesh.triangle(face);
        let position = [0, 1, 2].map(|d| b[0] * pa[d] + b[1] * pb[d] + b[2] * pc[d]);
        let face_normal = geom::normalize(geom::triangle_cross(pa, pb, pc)).unwrap_or([0.0, 1.0, 0.0]);
        let normal = if vertex_normals {
            let idx = mesh.faces[face];
            let [na, nb, nc] = idx.map(|i| mesh.normals[i as usize]);
            let blend = [0, 1, 2].map(|d| b[0] * na[d] + b[1] * nb[d] + b[2] * nc[d]);
            geom::normalize(blend).unwrap_or(face_normal)
        } else {
            face_normal
        };
        out.push(PointSample {
            position,
            normal,
            face,
        });
    }
    Ok(out)
}

fn tree_of(samples: &[PointSample]) -> KdTree {
    KdTree::new(samples.iter().map(|s| s.position).collect())
}

/// Nearest `to` sample for every `from` sample: (index, distance).
fn nearest_all(from: &[PointSample], to: &KdTree) -> Vec<(usize, f64)> {
    par::map_slice(from, |s| {
        let (i, d2) = to.nearest(s.position).expect("non-empty cloud");
        (i, d2.sqrt())
    })
}

fn require_non_empty(pred: &[PointSample], gt: &[PointSample]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::config("metric needs non-empty point sets"));
    }
    Ok(())
}

/// Nearest-neighbour correspondences in both directions, computed once and
/// shared by the metrics.
pub struct Correspondence {
    pub pred_to_gt: Vec<(usize, f64)>,
    pub gt_to_pred: Vec<(usize, f64)>,
}

impl Correspondence {
    pub fn new(pred: &[PointSample], gt: &[PointSample]) -> Result<Self> {
        require_non_empty(pred, gt)?;
        Ok(Self {
            pred_to_gt: nearest_all(pred, &tree_of(gt)),
            gt_to_pred: nearest_all(gt, &tree_of(pred)),
        })
    }

    /// Mean distances in cm: (prediction to scan, scan to prediction).
    pub fn chamfer(&self) -> (f64, f64) {
        let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
        (mean(&self.pred_to_gt) * CM_PER_UNIT, mean(&self.gt_to_pred) * CM_PER_UNIT)
    }

    pub fn f_score(&self, tau_cm: f64) -> f64 {
        let tau = tau_cm / CM_PER_UNIT;
        let pct = |v: &[(usize, f64)]| 100.0 * v.iter().filter(|x| x.1 <= tau).count() as f64 / v.len() as f64;
        let (p, r) = (pct(&self.pred_to_gt), pct(&self.gt_to_pred));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn normal_consistency(&self, pred: &[PointSample], gt: &[PointSample]) -> f64 {
        let mean = |from: &[PointSample], to: &[PointSample], nn: &[(usize, f64)]| {
            from.iter()
                .zip(nn)
                .map(|(s, &(j, _))| geom::dot(s.normal, to[j].normal))
                .sum::<f64>()
                / from.len() as f64
        };
        0.5 * (mean(pred, gt, &self.pred_to_gt) + mean(gt, pred, &self.gt_to_pred))
    }
}

/// (P2S, S2P) mean nearest-neighbour distances in cm.
pub fn chamfer(pred: &[PointSample], gt: &[PointSample]) -> Result<(f64, f64)> {
    Ok(Correspondence::new(pred, gt)?.chamfer())
}

/// Harmonic mean of precision and recall at `tau_cm`, in percent.
pub fn f_score(pred: &[PointSample], gt: &[PointSample], tau_cm: f64) -> Result<f64> {
    if !(tau_cm > 0.0) {
        return Err(Error::config(format!("f-score threshold {tau_cm} must be positive")));
    }
    Ok(Correspondence::new(pred, gt)?.f_score(tau_cm))
}

/// Mean over both directions of the dot product with the nearest sample's normal.
pub fn normal_consistency(pred: &[PointSample], gt: &[PointSample]) -> Result<f64> {
    Ok(Correspondence::new(pred, gt)?.normal_consistency(pred, gt))
}

/// Lattice box used for extraction: `[-1, 1]³` with a 5% margin.
pub const EXTRACTION_HALF_EXTENT: f64 = 1.05;

/// Gaussians whose cutoff box touches each coarse cell of the lattice.
struct Buckets {
    n: usize,
    lo: f64,
    size: f64,
    lists: Vec<Vec<u32>>,
}

impl Buckets {
    const CUTOFF: f64 = 3.0;

    fn new<T: Real>(set: &GaussianSet<T>, lo: f64, hi: f64, n: usize) -> Self {
        let size = (hi - lo) / n as f64;
        let mut lists = vec![Vec::new(); n * n * n];
        let cell = |v: f64| (((v - lo) / size).floor().max(0.0) as usize).min(n - 1);
        for (i, g) in set.gaussians.iter().enumerate() {
            let r = Self::CUTOFF * g.scale.iter().map(|s| s.as_f64()).fold(0.0, f64::max);
            let p = g.position.map(|v| v.as_f64());
            if (0..3).any(|d| p[d] + r < lo || p[d] - r > hi) {
                continue;
            }
            let a = [0, 1, 2].map(|d| cell(p[d] - r));
            let b = [0, 1, 2].map(|d| cell(p[d] + r));
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        lists[(z * n + y) * n + x].push(i as u32);
                    }
                }
            }
        }
        Self { n, lo, size, lists }
    }

    fn at(&self, p: Vec3) -> &[u32] {
        let c = p.map(|v| (((v - self.lo) / self.size).floor().max(0.0) as usize).min(self.n - 1));
        &self.lists[(c[2] * self.n + c[1]) * self.n + c[0]]
    }
}

/// Marching cubes on the summed Gaussian density over the extraction box,
/// keeping the largest connected component. Colour sets give vertex colours
/// blended by density; direction sets give encoded directions.
pub fn gaussians_to_mesh<T: Real>(set: &GaussianSet<T>, grid: usize, iso: f64) -> Result<TriMesh> {
    if grid < 8 {
        return Err(Error::config(format!("extraction grid {grid} must be at least 8")));
    }
    let (lo, hi) = (-EXTRACTION_HALF_EXTENT, EXTRACTION_HALF_EXTENT);
    let spacing = (hi - lo) / (grid - 1) as f64;
    let buckets = Buckets::new(set, lo, hi, (grid / 8).max(1));
    let density = |p: Vec3| -> f64 {
        buckets
            .at(p)
            .iter()
            .map(|&i| gaussian_density(&set.gaussians[i as usize], p, Buckets::CUTOFF))
            .sum()
    };
    let field = ScalarGrid::sample([grid; 3], [lo; 3], spacing, density);
    let mut mesh = marching_cubes(&field, iso)?.largest_component();
    let colors = par::map_slice(&mesh.vertices, |&p| {
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for &i in buckets.at(p) {
            let g = &set.gaussians[i as usize];
            let w = gaussian_density(g, p, Buckets::CUTOFF);
            let f = g.feature.map(|v| v.as_f64());
            let c = match set.kind {
                FeatureKind::Color => f,
                FeatureKind::Direction => f.map(|v| 0.5 * (v + 1.0)),
            };
            for d in 0..3 {
                acc[d] += w * c[d];
            }
            wsum += w;
        }
        if wsum > 0.0 {
            acc.map(|v| v / wsum)
        } else {
            [0.5; 3]
        }
    });
    mesh.colors = Some(colors);
    Ok(mesh)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    pub seed: u64,
    pub tau_cm: f64,
    /// Side of the front/back renders used by the perceptual comparison.
    pub render_res: usize,
    pub rig: RigConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
            tau_cm: 1.0,
            render_res: 256,
            rig: RigConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd_p2s: f64,
    pub cd_s2p: f64,
    pub nc: f64,
    pub f_score: f64,
    pub perceptual_front: f64,
    pub perceptual_back: f64,
}

pub const CSV_HEADER: &str = "scene_id,cd_p2s_cm,cd_s2p_cm,nc,f_score,perc_front,perc_back";

impl MetricReport {
    pub fn csv_row(&self, scene_id: &str) -> String {
        format!(
            "{scene_id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.cd_p2s, self.cd_s2p, self.nc, self.f_score, self.perceptual_front, self.perceptual_back
        )
    }

    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            cd_p2s: avg(|r| r.cd_p2s),
            cd_s2p: avg(|r| r.cd_s2p),
            nc: avg(|r| r.nc),
            f_score: avg(|r| r.f_score),
            perceptual_front: avg(|r| r.perceptual_front),
            perceptual_back: avg(|r| r.perceptual_back),
        }
    }
}

/// CSV table with one row per scene followed by a `mean` row.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER}");
    for (id, r) in rows {
        let _ = writeln!(s, "{}", r.csv_row(id));
    }
    let all: Vec<MetricReport> = rows.iter().map(|r| r.1).collect();
    let _ = writeln!(s, "{}", MetricReport::mean(&all).csv_row("mean"));
    s
}

fn with_color_fallback(mesh: &TriMesh) -> std::borrow::Cow<'_, TriMesh> {
    if mesh.colors.is_some() {
        std::borrow::Cow::Borrowed(mesh)
    } else {
        log::warn!("mesh without vertex colors rendered in uniform gray");
        let mut m = mesh.clone();
        m.colors = Some(vec![[0.5; 3]; m.vertices.len()]);
        std::borrow::Cow::Owned(m)
    }
}

pub fn evaluate(pred: &TriMesh, gt: &TriMesh, config: &EvalConfig, perceptual: &dyn Perceptual) -> Result<MetricReport> {
    let ps = sample_surface(pred, config.samples, config.seed)?;
    let gs = sample_surface(gt, config.samples, config.seed)?;
    let corr = Correspondence::new(&ps, &gs)?;
    let (cd_p2s, cd_s2p) = corr.chamfer();
    let (pm, gm) = (with_color_fallback(pred), with_color_fallback(gt));
    let mut perc = [0.0; 2];
    for (k, az) in [0.0, 180.0].into_iter().enumerate() {
        let cam = config.rig.camera(az, 0.0, config.render_res)?;
        let a = raster_mesh(&pm, &cam, RasterMode::Rgb)?;
        let b = raster_mesh(&gm, &cam, RasterMode::Rgb)?;
        perc[k] = perceptual_distance(perceptual, &a.image, &b.image)?;
    }
    Ok(MetricReport {
        cd_p2s,
        cd_s2p,
        nc: corr.normal_consistency(&ps, &gs),
        f_score: corr.f_score(config.tau_cm),
        perceptual_front: perc[0],
        perceptual_back: perc[1],
    })
}

#[cfg(test)]
mod tests;
