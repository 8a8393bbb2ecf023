//! Tile-based differentiable Gaussian rasterizer.
//!
//! Forward: EWA projection, 16×16 tile binning, per-tile depth sort and
//! front-to-back alpha compositing. Backward: analytic gradients for all 14
//! record scalars, computed per tile into local buffers and reduced in tile
//! order so results do not depend on the thread count.

mod backward;

pub use backward::{project_backward, render_backward, ScreenGrad};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{covariance, FeatureKind, Gaussian, GaussianSet, RECORD_LEN};
use crate::par;

pub const TILE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub near: f64,
    /// Added to both diagonal entries of every screen covariance.
    pub cov_floor: f64,
    /// Contributions with weight below this are skipped.
    pub min_weight: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Extent of a splat footprint in standard deviations.
    pub sigma_extent: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near: 0.01,
            cov_floor: 0.3,
            min_weight: 1.0 / 255.0,
            min_transmittance: 1e-4,
            sigma_extent: 3.0,
        }
    }
}

/// Background used for each feature kind: white for color, zero for
/// (encoded) directions.
pub fn default_background(kind: FeatureKind) -> [f64; 3] {
    match kind {
        FeatureKind::Color => [1.0; 3],
        FeatureKind::Direction => [0.0; 3],
    }
}

/// Camera quantities converted once to the working precision.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View<T> {
    pub rot: [[T; 3]; 3],
    pub origin: [T; 3],
    pub focal: [T; 2],
    pub center: [T; 2],
    pub width: usize,
    pub height: usize,
}

impl<T: Real> View<T> {
    pub fn new(camera: &Camera) -> Self {
        let r = camera.rotation();
        let (fx, fy) = camera.focal();
        let (cx, cy) = camera.principal_point();
        Self {
            rot: r.map(|row| row.map(T::lit)),
            origin: camera.position.map(T::lit),
            focal: [T::lit(fx), T::lit(fy)],
            center: [T::lit(cx), T::lit(cy)],
            width: camera.width,
            height: camera.height,
        }
    }

    pub fn to_camera(&self, p: [T; 3]) -> [T; 3] {
        let d = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        self.rot.map(|row| row[0] * d[0] + row[1] * d[1] + row[2] * d[2])
    }

    pub fn tiles(&self) -> (usize, usize) {
        (self.width.div_ceil(TILE), self.height.div_ceil(TILE))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian<T> {
    /// Index into the source set.
    pub index: usize,
    /// Pixel coordinates of the center (pixel `(u, v)` spans `[u, u+1)`).
    pub mean: [T; 2],
    /// Screen covariance `(xx, xy, yy)`, floor included.
    pub cov: [T; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [T; 3],
    pub depth: T,
    pub opacity: T,
    pub feature: [T; 3],
    /// Footprint half-extent in pixels.
    pub radius: T,
    /// Center in camera coordinates.
    pub view: [T; 3],
    /// Footprint exponents below this give a weight safely under the skip
    /// threshold, so the exponential can be avoided.
    pub skip_below: T,
}

impl<T: Real> ProjectedGaussian<T> {
    /// Whether the footprint square reaches any pixel center of the tile.
    fn touches_tile(&self, tx: usize, ty: usize) -> bool {
        let lo = |t: usize| T::lit((t * TILE) as f64 + 0.5);
        let hi = |t: usize| T::lit((t * TILE + TILE - 1) as f64 + 0.5);
        self.mean[0] + self.radius >= lo(tx)
            && self.mean[0] - self.radius <= hi(tx)
            && self.mean[1] + self.radius >= lo(ty)
            && self.mean[1] - self.radius <= hi(ty)
    }

    /// Exponent of the footprint at pixel coordinates `p`.
    #[inline]
    pub fn power(&self, p: [T; 2]) -> T {
        let dx = p[0] - self.mean[0];
        let dy = p[1] - self.mean[1];
        let [a, b, c] = self.conic;
        -T::lit(0.5) * (a * dx * dx + c * dy * dy) - b * dx * dy
    }
}

/// Perspective Jacobian of the pixel mapping at camera-space point `t`.
#[inline]
pub(crate) fn projection_jacobian<T: Real>(view: &View<T>, t: [T; 3]) -> [[T; 3]; 2] {
    let [fx, fy] = view.focal;
    let iz = T::one() / t[2];
    [
        [fx * iz, T::zero(), -fx * t[0] * iz * iz],
        [T::zero(), fy * iz, -fy * t[1] * iz * iz],
    ]
}

/// Camera-space covariance `W Σ Wᵀ`.
#[inline]
pub(crate) fn view_covariance<T: Real>(view: &View<T>, sigma: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let w = &view.rot;
    let mut ws = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            ws[i][j] = (0..3).map(|k| w[i][k] * sigma[k][j]).sum();
        }
    }
    let mut v = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            v[i][j] = (0..3).map(|k| ws[i][k] * w[j][k]).sum();
        }
    }
    v
}

/// `ln(min_weight / opacity)` minus a margin that dwarfs rounding in `exp`;
/// never skips when either value is zero.
fn skip_bound<T: Real>(opacity: T, min_weight: f64) -> T {
    let o = opacity.as_f64();
    if min_weight > 0.0 && o > 0.0 {
        T::lit((min_weight / o).ln() - 1e-3)
    } else {
        T::lit(f64::NEG_INFINITY)
    }
}

pub(crate) fn project_one<T: Real>(
    view: &View<T>,
    settings: &RenderSettings,
    index: usize,
    g: &Gaussian<T>,
) -> Option<ProjectedGaussian<T>> {
    let t = view.to_camera(g.position);
    if t[2] <= T::lit(settings.near) {
        return None;
    }
    let j = projection_jacobian(view, t);
    let v = view_covariance(view, &covariance(g));
    let jv = |r: usize, c: usize| -> T {
        (0..3)
            .map(|k| j[r][k] * (0..3).map(|l| v[k][l] * j[c][l]).sum::<T>())
            .sum()
    };
    let floor = T::lit(settings.cov_floor);
    let cov = [jv(0, 0) + floor, jv(0, 1), jv(1, 1) + floor];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > T::zero()) {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let mid = T::lit(0.5) * (cov[0] + cov[2]);
    let lambda = mid + (mid * mid - det).max(T::lit(0.1)).sqrt();
    let radius = T::lit(settings.sigma_extent) * lambda.sqrt();
    let iz = T::one() / t[2];
    let mean = [
        view.focal[0] * t[0] * iz + view.center[0],
        view.focal[1] * t[1] * iz + view.center[1],
    ];
    Some(ProjectedGaussian {
        index,
        mean,
        cov,
        conic,
        depth: t[2],
        opacity: g.opacity,
        feature: g.feature,
        radius,
        view: t,
        skip_below: skip_bound(g.opacity, settings.min_weight),
    })
}

/// Projects every Gaussian in front of the near plane, in set order.
pub fn project<T: Real>(
    set: &GaussianSet<T>,
    camera: &Camera,
    settings: &RenderSettings,
) -> Vec<ProjectedGaussian<T>> {
    let view = View::new(camera);
    set.gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_one(&view, settings, i, g))
        .collect()
}

/// Forward result plus the buffers the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    /// Channel-first 3×H×W feature image.
    pub image: Vec<T>,
    /// H×W.
    pub alpha: Vec<T>,
    /// Transmittance left after compositing, H×W.
    pub final_transmittance: Vec<T>,
    /// Number of tile-list entries traversed per pixel, H×W.
    pub contributors: Vec<u32>,
    pub background: [T; 3],
    pub(crate) projected: Vec<ProjectedGaussian<T>>,
    /// Per tile: positions into `projected`, sorted by (depth, index).
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) source_len: usize,
    pub(crate) view: View<T>,
}

impl<T: Real> RenderOutput<T> {
    pub fn projected(&self) -> &[ProjectedGaussian<T>] {
        &self.projected
    }

    /// Feature image followed by alpha as a 4×H×W array.
    pub fn stacked(&self) -> Vec<T> {
        let mut out = self.image.clone();
        out.extend_from_slice(&self.alpha);
        out
    }
}

pub(crate) fn bin_tiles<T: Real>(view: &View<T>, projected: &[ProjectedGaussian<T>]) -> Vec<Vec<u32>> {
    let (tw, th) = view.tiles();
    let mut tiles = vec![Vec::new(); tw * th];
    let scale = T::lit(1.0 / TILE as f64);
    for (k, p) in projected.iter().enumerate() {
        let tx0 = ((p.mean[0] - p.radius) * scale).floor().as_f64().max(0.0) as usize;
        let ty0 = ((p.mean[1] - p.radius) * scale).floor().as_f64().max(0.0) as usize;
        let tx1 = ((p.mean[0] + p.radius) * scale).floor().as_f64().min((tw - 1) as f64);
        let ty1 = ((p.mean[1] + p.radius) * scale).floor().as_f64().min((th - 1) as f64);
        if tx1 < 0.0 || ty1 < 0.0 {
            continue;
        }
        for ty in ty0..=ty1 as usize {
            for tx in tx0..=tx1 as usize {
                if p.touches_tile(tx, ty) {
                    tiles[ty * tw + tx].push(k as u32);
                }
            }
        }
    }
    for list in &mut tiles {
        list.sort_by(|&a, &b| {
            let (pa, pb) = (&projected[a as usize], &projected[b as usize]);
            pa.depth
                .partial_cmp(&pb.depth)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(pa.index.cmp(&pb.index))
        });
    }
    tiles
}

/// Pixel rectangle `(x0, y0, x1, y1)` of tile `t`, exclusive upper bounds.
pub(crate) fn tile_rect(t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let tw = width.div_ceil(TILE);
    let (tx, ty) = (t % tw, t / tw);
    let x0 = tx * TILE;
    let y0 = ty * TILE;
    (x0, y0, (x0 + TILE).min(width), (y0 + TILE).min(height))
}

struct PixelResult<T> {
    color: [T; 3],
    transmittance: T,
    traversed: u32,
}

fn composite_pixel<T: Real>(
    projected: &[ProjectedGaussian<T>],
    list: &[u32],
    p: [T; 2],
    background: [T; 3],
    settings: &RenderSettings,
) -> PixelResult<T> {
    let min_w = T::lit(settings.min_weight);
    let min_t = T::lit(settings.min_transmittance);
    let mut color = [T::zero(); 3];
    let mut t = T::one();
    let mut traversed = 0u32;
    for &k in list {
        traversed += 1;
        let g = &projected[k as usize];
        let power = g.power(p);
        if power > T::zero() || power < g.skip_below {
            continue;
        }
        let w = g.opacity * power.exp();
        if w < min_w {
            continue;
        }
        for c in 0..3 {
            color[c] += g.feature[c] * w * t;
        }
        t *= T::one() - w;
        if t < min_t {
            break;
        }
    }
    for c in 0..3 {
        color[c] += background[c] * t;
    }
    PixelResult {
        color,
        transmittance: t,
        traversed,
    }
}

/// Renders the feature image and alpha of `set` seen from `camera`.
pub fn render<T: Real>(
    set: &GaussianSet<T>,
    camera: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
) -> RenderOutput<T> {
    let view = View::new(camera);
    let projected: Vec<_> = par::map_range(set.len(), |i| {
        project_one(&view, settings, i, &set.gaussians[i])
    })
    .into_iter()
    .flatten()
    .collect();
    let tiles = bin_tiles(&view, &projected);
    let (w, h) = (camera.width, camera.height);
    let bg = background.map(T::lit);
    let per_tile = par::map_range(tiles.len(), |ti| {
        let (x0, y0, x1, y1) = tile_rect(ti, w, h);
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            for x in x0..x1 {
                let p = [T::lit(x as f64 + 0.5), T::lit(y as f64 + 0.5)];
                out.push(composite_pixel(&projected, &tiles[ti], p, bg, settings));
            }
        }
        out
    });
    let pixels = w * h;
    let mut image = vec![T::zero(); 3 * pixels];
    let mut alpha = vec![T::zero(); pixels];
    let mut final_t = vec![T::one(); pixels];
    let mut contributors = vec![0u32; pixels];
    for (ti, results) in per_tile.into_iter().enumerate() {
        let (x0, y0, x1, _) = tile_rect(ti, w, h);
        let tw = x1 - x0;
        for (k, r) in results.into_iter().enumerate() {
            let pix = (y0 + k / tw) * w + x0 + k % tw;
            for c in 0..3 {
                image[c * pixels + pix] = r.color[c];
            }
            alpha[pix] = T::one() - r.transmittance;
            final_t[pix] = r.transmittance;
            contributors[pix] = r.traversed;
        }
    }
    RenderOutput {
        width: w,
        height: h,
        image,
        alpha,
        final_transmittance: final_t,
        contributors,
        background: bg,
        projected,
        tiles,
        source_len: set.len(),
        view,
    }
}

/// Source indices of the Gaussians that contributed to each pixel, front to
/// back. Two renders with equal sets composite the same terms, so their
/// outputs are smooth in the parameters between them.
pub fn contributor_sets<T: Real>(out: &RenderOutput<T>, settings: &RenderSettings) -> Vec<Vec<usize>> {
    let (w, h) = (out.width, out.height);
    let mut sets = vec![Vec::new(); w * h];
    let min_w = T::lit(settings.min_weight);
    for (ti, list) in out.tiles.iter().enumerate() {
        let (x0, y0, x1, y1) = tile_rect(ti, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let pix = y * w + x;
                let p = [T::lit(x as f64 + 0.5), T::lit(y as f64 + 0.5)];
                for &k in &list[..out.contributors[pix] as usize] {
                    let g = &out.projected[k as usize];
                    let power = g.power(p);
                    if power <= T::zero() && g.opacity * power.exp() >= min_w {
                        sets[pix].push(g.index);
                    }
                }
            }
        }
    }
    sets
}

/// Independent renders, one per camera, in camera order.
pub fn render_views<T: Real>(
    set: &GaussianSet<T>,
    cameras: &[Camera],
    background: [f64; 3],
    settings: &RenderSettings,
) -> Vec<RenderOutput<T>> {
    cameras
        .iter()
        .map(|c| render(set, c, background, settings))
        .collect()
}

/// The eight training views.
pub fn render_eight_views<T: Real>(
    set: &GaussianSet<T>,
    cameras: &[Camera],
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<Vec<RenderOutput<T>>> {
    if cameras.len() != 8 {
        return Err(Error::usage(format!("expected 8 cameras, got {}", cameras.len())));
    }
    Ok(render_views(set, cameras, background, settings))
}

/// Tape op: flat records `[N, 14]` → `[1, 4, H, W]` (feature channels, then alpha).
pub fn render_on_tape<T: Real>(
    tape: &mut Tape<T>,
    records: Var,
    kind: FeatureKind,
    camera: &Camera,
    background: [f64; 3],
    settings: RenderSettings,
) -> Result<Var> {
    let shape = tape.shape(records).to_vec();
    if shape.len() != 2 || shape[1] != RECORD_LEN {
        return Err(Error::config(format!(
            "render expects [N, {RECORD_LEN}] records, got {shape:?}"
        )));
    }
    let set = GaussianSet::from_flat(kind, tape.value(records).data())?;
    let out = render(&set, camera, background, &settings);
    let (h, w) = (camera.height, camera.width);
    let value = Tensor::new(vec![1, 4, h, w], out.stacked())?;
    let backward = Box::new(move |g: &Tensor<T>| {
        let pixels = h * w;
        let (gc, ga) = g.data().split_at(3 * pixels);
        let grads = render_backward(&set, &out, gc, ga, &settings).expect("buffers from this forward");
        vec![Tensor::new(vec![set.len(), RECORD_LEN], grads).expect("record grads")]
    });
    Ok(tape.custom("render", &[records], value, backward))
}
