//! The 14-scalar Gaussian record, activation of raw network maps into valid
//! records, multi-view fusion, covariance and density queries.
//!
//! Flat record layout (also used for gradients): position 0..3, scale 3..6,
//! rotation quaternion `(w, x, y, z)` 6..10, opacity 10, feature 11..14.

mod ply;

pub use ply::{read_ply, write_ply};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::Vec3;

pub const RECORD_LEN: usize = 14;
pub const POS: usize = 0;
pub const SCALE: usize = 3;
pub const ROT: usize = 6;
pub const OPACITY: usize = 10;
pub const FEATURE: usize = 11;

/// What the 3-vector feature of a set means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// RGB in [0, 1].
    Color,
    /// Unit direction (surface normal).
    Direction,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian<T> {
    pub position: [T; 3],
    pub scale: [T; 3],
    pub rotation: [T; 4],
    pub opacity: T,
    pub feature: [T; 3],
}

impl<T: Real> Gaussian<T> {
    pub fn from_record(r: &[T]) -> Self {
        Self {
            position: [r[0], r[1], r[2]],
            scale: [r[3], r[4], r[5]],
            rotation: [r[6], r[7], r[8], r[9]],
            opacity: r[10],
            feature: [r[11], r[12], r[13]],
        }
    }

    pub fn write_record(&self, out: &mut [T]) {
        out[0..3].copy_from_slice(&self.position);
        out[3..6].copy_from_slice(&self.scale);
        out[6..10].copy_from_slice(&self.rotation);
        out[10] = self.opacity;
        out[11..14].copy_from_slice(&self.feature);
    }

    /// Unit quaternion, positive scales and opacity in [0, 1].
    pub fn is_valid(&self) -> bool {
        let q = self.rotation.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        (q - 1.0).abs() <= 1e-6
            && self.scale.iter().all(|s| s.as_f64() > 0.0)
            && (0.0..=1.0).contains(&self.opacity.as_f64())
            && self.position.iter().chain(&self.feature).all(|v| v.is_finite())
    }
}

/// Rotation matrix (row-major) of quaternion `(w, x, y, z)`. The quaternion
/// is used as given; callers keep it normalised.
#[inline]
pub fn rotation_matrix<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// `R · diag(s²) · Rᵀ`.
pub fn covariance<T: Real>(g: &Gaussian<T>) -> [[T; 3]; 3] {
    let r = rotation_matrix(g.rotation);
    let s2 = [
        g.scale[0] * g.scale[0],
        g.scale[1] * g.scale[1],
        g.scale[2] * g.scale[2],
    ];
    let mut m = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| r[i][k] * s2[k] * r[j][k]).sum();
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet<T> {
    pub kind: FeatureKind,
    pub gaussians: Vec<Gaussian<T>>,
}

impl<T: Real> GaussianSet<T> {
    pub fn new(kind: FeatureKind) -> Self {
        Self {
            kind,
            gaussians: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// N×14 flat records.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.len() * RECORD_LEN];
        for (g, rec) in self.gaussians.iter().zip(out.chunks_mut(RECORD_LEN)) {
            g.write_record(rec);
        }
        out
    }

    pub fn from_flat(kind: FeatureKind, flat: &[T]) -> Result<Self> {
        if flat.len() % RECORD_LEN != 0 {
            return Err(Error::config(format!(
                "{} scalars is not a whole number of {RECORD_LEN}-scalar records",
                flat.len()
            )));
        }
        Ok(Self {
            kind,
            gaussians: flat.chunks(RECORD_LEN).map(Gaussian::from_record).collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> GaussianSet<U> {
        let flat: Vec<U> = self.to_flat().iter().map(|v| U::lit(v.as_f64())).collect();
        GaussianSet::from_flat(self.kind, &flat).expect("whole records")
    }
}

/// Raw H×W×14 network output plus the camera it was predicted for.
/// Stored channel-first (14×H×W).
#[derive(Clone, Debug)]
pub struct SplatFeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub camera: Camera,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivationParams {
    /// Half-extent of the scene box; positions are `tanh(raw) · bounds`.
    pub bounds: f64,
    /// Scale at raw value 0.
    pub base_scale: f64,
}

impl Default for ActivationParams {
    fn default() -> Self {
        Self::for_map(1.0, 32 * 32)
    }
}

impl ActivationParams {
    /// `base_scale = 2 · bounds / √pixels`: one map's footprints tile the box.
    pub fn for_map(bounds: f64, pixels: usize) -> Self {
        Self {
            bounds,
            base_scale: 2.0 * bounds / (pixels.max(1) as f64).sqrt(),
        }
    }
}

const SCALE_CLAMP: (f64, f64) = (-10.0, 1.0);
const NORM_FLOOR: f64 = 1e-8;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Normalises `v`, or returns `fallback` (with zero Jacobian) below the floor.
fn normalize_fwd<T: Real, const N: usize>(v: [T; N], fallback: [T; N]) -> ([T; N], T) {
    let n = v.iter().map(|&a| a * a).sum::<T>().sqrt();
    if n < T::lit(NORM_FLOOR) {
        (fallback, T::zero())
    } else {
        let mut out = v;
        for a in &mut out {
            *a /= n;
        }
        (out, n)
    }
}

/// Backward of `u = v / ‖v‖`: `(g − u (u·g)) / ‖v‖`.
fn normalize_bwd<T: Real, const N: usize>(u: [T; N], n: T, g: [T; N]) -> [T; N] {
    if n == T::zero() {
        return [T::zero(); N];
    }
    let ug: T = (0..N).map(|i| u[i] * g[i]).sum();
    let mut out = [T::zero(); N];
    for i in 0..N {
        out[i] = (g[i] - u[i] * ug) / n;
    }
    out
}

const IDENTITY_Q: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
const DEFAULT_DIR: [f64; 3] = [0.0, 0.0, 1.0];

fn lit_arr<T: Real, const N: usize>(a: [f64; N]) -> [T; N] {
    a.map(T::lit)
}

/// Activates one raw 14-vector into a record.
pub fn activate_record<T: Real>(raw: &[T], kind: FeatureKind, params: &ActivationParams) -> Gaussian<T> {
    let bounds = T::lit(params.bounds);
    let base = T::lit(params.base_scale);
    let (lo, hi) = (T::lit(SCALE_CLAMP.0), T::lit(SCALE_CLAMP.1));
    let position = [0, 1, 2].map(|i| raw[POS + i].tanh() * bounds);
    let scale = [0, 1, 2].map(|i| raw[SCALE + i].max(lo).min(hi).exp() * base);
    let (rotation, _) = normalize_fwd(
        [raw[ROT], raw[ROT + 1], raw[ROT + 2], raw[ROT + 3]],
        lit_arr(IDENTITY_Q),
    );
    let opacity = sigmoid(raw[OPACITY]);
    let fr = [raw[FEATURE], raw[FEATURE + 1], raw[FEATURE + 2]];
    let feature = match kind {
        FeatureKind::Color => fr.map(sigmoid),
        FeatureKind::Direction => normalize_fwd(fr, lit_arr(DEFAULT_DIR)).0,
    };
    Gaussian {
        position,
        scale,
        rotation,
        opacity,
        feature,
    }
}

/// Backward of [`activate_record`]: raw gradient from the record gradient.
pub fn activate_record_backward<T: Real>(
    raw: &[T],
    kind: FeatureKind,
    params: &ActivationParams,
    grad: &[T],
) -> [T; RECORD_LEN] {
    let bounds = T::lit(params.bounds);
    let base = T::lit(params.base_scale);
    let mut out = [T::zero(); RECORD_LEN];
    for i in 0..3 {
        let t = raw[POS + i].tanh();
        out[POS + i] = grad[POS + i] * bounds * (T::one() - t * t);
    }
    for i in 0..3 {
        let r = raw[SCALE + i];
        if r > T::lit(SCALE_CLAMP.0) && r < T::lit(SCALE_CLAMP.1) {
            out[SCALE + i] = grad[SCALE + i] * r.exp() * base;
        }
    }
    let q = [raw[ROT], raw[ROT + 1], raw[ROT + 2], raw[ROT + 3]];
    let (u, n) = normalize_fwd(q, lit_arr(IDENTITY_Q));
    let gq = normalize_bwd(u, n, [grad[ROT], grad[ROT + 1], grad[ROT + 2], grad[ROT + 3]]);
    out[ROT..ROT + 4].copy_from_slice(&gq);
    let s = sigmoid(raw[OPACITY]);
    out[OPACITY] = grad[OPACITY] * s * (T::one() - s);
    let fr = [raw[FEATURE], raw[FEATURE + 1], raw[FEATURE + 2]];
    let gf = [grad[FEATURE], grad[FEATURE + 1], grad[FEATURE + 2]];
    let gr = match kind {
        FeatureKind::Color => {
            let mut g = [T::zero(); 3];
            for i in 0..3 {
                let s = sigmoid(fr[i]);
                g[i] = gf[i] * s * (T::one() - s);
            }
            g
        }
        FeatureKind::Direction => {
            let (u, n) = normalize_fwd(fr, lit_arr(DEFAULT_DIR));
            normalize_bwd(u, n, gf)
        }
    };
    out[FEATURE..FEATURE + 3].copy_from_slice(&gr);
    out
}

fn gather_pixel<T: Real>(raw: &[T], pixels: usize, p: usize) -> [T; RECORD_LEN] {
    let mut r = [T::zero(); RECORD_LEN];
    for (c, v) in r.iter_mut().enumerate() {
        *v = raw[c * pixels + p];
    }
    r
}

/// Activates a channel-first 14×H×W raw map into H·W records (row-major pixels).
pub fn activate_raw<T: Real>(
    map: &SplatFeatureMap<T>,
    kind: FeatureKind,
    params: &ActivationParams,
) -> Result<GaussianSet<T>> {
    let pixels = map.height * map.width;
    if map.data.len() != RECORD_LEN * pixels {
        return Err(Error::config(format!(
            "raw map must have {RECORD_LEN} channels of {}x{}",
            map.height, map.width
        )));
    }
    let gaussians = (0..pixels)
        .map(|p| activate_record(&gather_pixel(&map.data, pixels, p), kind, params))
        .collect();
    Ok(GaussianSet { kind, gaussians })
}

/// Tape op: raw `[1, 14, H, W]` → activated flat records `[H·W, 14]`.
pub fn activate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    raw: Var,
    kind: FeatureKind,
    params: ActivationParams,
) -> Result<Var> {
    let [b, c, h, w] = tape.value(raw).dims4()?;
    if b != 1 || c != RECORD_LEN {
        return Err(Error::config(format!(
            "activation expects [1, {RECORD_LEN}, H, W], got {:?}",
            tape.shape(raw)
        )));
    }
    let pixels = h * w;
    let raw_vals = tape.value(raw).data().to_vec();
    let mut flat = vec![T::zero(); pixels * RECORD_LEN];
    for p in 0..pixels {
        activate_record(&gather_pixel(&raw_vals, pixels, p), kind, &params)
            .write_record(&mut flat[p * RECORD_LEN..(p + 1) * RECORD_LEN]);
    }
    let value = Tensor::new(vec![pixels, RECORD_LEN], flat)?;
    let backward = Box::new(move |g: &Tensor<T>| {
        let mut out = vec![T::zero(); RECORD_LEN * pixels];
        for p in 0..pixels {
            let r = gather_pixel(&raw_vals, pixels, p);
            let gr = activate_record_backward(
                &r,
                kind,
                &params,
                &g.data()[p * RECORD_LEN..(p + 1) * RECORD_LEN],
            );
            for (c, v) in gr.into_iter().enumerate() {
                out[c * pixels + p] = v;
            }
        }
        vec![Tensor::new(vec![1, RECORD_LEN, h, w], out).expect("raw shape")]
    });
    Ok(tape.custom("activate_raw", &[raw], value, backward))
}

/// Concatenates per-view sets in the given order (front, back, left, right).
pub fn fuse_view_maps<T: Real>(maps: &[GaussianSet<T>]) -> Result<GaussianSet<T>> {
    let kind = maps
        .first()
        .map(|m| m.kind)
        .ok_or_else(|| Error::usage("fuse_view_maps needs at least one set"))?;
    if maps.iter().any(|m| m.kind != kind) {
        return Err(Error::usage("cannot fuse color and direction Gaussian sets"));
    }
    Ok(GaussianSet {
        kind,
        gaussians: maps.iter().flat_map(|m| m.gaussians.iter().copied()).collect(),
    })
}

/// Σᵢ αᵢ · exp(−½ (p−xᵢ)ᵀ Σᵢ⁻¹ (p−xᵢ)), skipping Gaussians farther than
/// 3 of their largest sigmas.
pub fn density_at<T: Real>(set: &GaussianSet<T>, p: Vec3) -> f64 {
    set.gaussians.iter().map(|g| gaussian_density(g, p, 3.0)).sum()
}

/// Contribution of one Gaussian at `p`, zero beyond `cutoff` sigmas.
pub fn gaussian_density<T: Real>(g: &Gaussian<T>, p: Vec3, cutoff: f64) -> f64 {
    let d = [
        p[0] - g.position[0].as_f64(),
        p[1] - g.position[1].as_f64(),
        p[2] - g.position[2].as_f64(),
    ];
    let smax = g.scale.iter().map(|s| s.as_f64()).fold(0.0, f64::max);
    if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] > (cutoff * smax).powi(2) {
        return 0.0;
    }
    let r = rotation_matrix(g.rotation.map(|v| v.as_f64()));
    // local = Rᵀ d
    let mut m = 0.0;
    for k in 0..3 {
        let l = r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2];
        let s = g.scale[k].as_f64();
        m += (l / s) * (l / s);
    }
    g.opacity.as_f64() * (-0.5 * m).exp()
}
