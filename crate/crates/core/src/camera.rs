//! Pinhole cameras on an orbit around the subject, per-pixel rays with
//! Plücker embeddings, and the eight-view training protocol.
//!
//! Conventions: world y is up and the subject faces +z. Camera space is
//! x right, y down, z forward; pixel `(u, v)` has its center at
//! `(u + 0.5, v + 0.5)` and the principal point is the image center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if geom::dist2(position, target) < 1e-18 {
            return Err(Error::config("camera position equals its target"));
        }
        if !(fov_y_deg > 0.0 && fov_y_deg < 180.0) {
            return Err(Error::config(format!("field of view {fov_y_deg} outside (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::config("camera resolution must be at least 1x1"));
        }
        Ok(Self {
            position,
            target,
            up,
            fov_y_deg,
            width,
            height,
        })
    }

    /// Unit view direction.
    pub fn forward(&self) -> Vec3 {
        geom::normalize(geom::sub(self.target, self.position)).expect("position != target")
    }

    /// World-to-camera rotation, rows = (right, down, forward).
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let f = self.forward();
        let mut up = geom::normalize(self.up).unwrap_or([0.0, 1.0, 0.0]);
        if geom::dot(f, up).abs() > 0.999_999 {
            // looking straight along the hint: fall back to a horizontal axis
            up = if f[1] > 0.0 { [0.0, 0.0, 1.0] } else { [0.0, 0.0, -1.0] };
        }
        let right = geom::normalize(geom::cross(f, up)).expect("non-parallel");
        let cam_up = geom::cross(right, f);
        [right, geom::scale(cam_up, -1.0), f]
    }

    /// Focal lengths in pixels (square pixels; the fov is vertical).
    pub fn focal(&self) -> (f64, f64) {
        let fy = 0.5 * self.height as f64 / (0.5 * self.fov_y_deg.to_radians()).tan();
        (fy, fy)
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        geom::mat_vec(&self.rotation(), geom::sub(p, self.position))
    }

    /// Pixel coordinates and view depth, or `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<([f64; 2], f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 1e-9 {
            return None;
        }
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        Some(([fx * c[0] / c[2] + cx, fy * c[1] / c[2] + cy], c[2]))
    }

    /// Same camera at a different resolution (same field of view).
    pub fn with_resolution(&self, width: usize, height: usize) -> Result<Self> {
        Self::new(self.position, self.target, self.up, self.fov_y_deg, width, height)
    }

    /// Unit world-space direction of the ray through pixel coordinates `(x, y)`.
    pub fn pixel_direction(&self, x: f64, y: f64) -> Vec3 {
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        let d = [(x - cx) / fx, (y - cy) / fy, 1.0];
        let w = geom::mat_t_vec(&self.rotation(), d);
        geom::normalize(w).expect("finite ray")
    }
}

/// JSON record describing an orbit camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        make_orbit_camera(
            self.azimuth_deg,
            self.elevation_deg,
            self.radius,
            self.fov_deg,
            (self.width, self.height),
        )
    }
}

/// Camera on a sphere around the origin, looking at the origin with y up.
///
/// Azimuth 0° sits on +z (the subject's front), 90° on +x (the subject's
/// left), 180° behind and 270° on the subject's right.
pub fn make_orbit_camera(
    azimuth_deg: f64,
    elevation_deg: f64,
    radius: f64,
    fov_deg: f64,
    (width, height): (usize, usize),
) -> Result<Camera> {
    if !(radius > 0.0) {
        return Err(Error::config(format!("orbit radius {radius} must be positive")));
    }
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let position = [
        radius * el.cos() * az.sin(),
        radius * el.sin(),
        radius * el.cos() * az.cos(),
    ];
    Camera::new(position, [0.0; 3], [0.0, 1.0, 0.0], fov_deg, width, height)
}

/// Per-pixel rays through pixel centers, row-major.
#[derive(Clone, Debug)]
pub struct RayMap {
    pub width: usize,
    pub height: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
}

impl RayMap {
    /// Plücker embedding of pixel `i`: direction followed by origin × direction.
    pub fn plucker(&self, i: usize) -> [f64; 6] {
        let d = self.directions[i];
        let m = geom::cross(self.origins[i], d);
        [d[0], d[1], d[2], m[0], m[1], m[2]]
    }

    /// Channel-first 6×H×W embedding.
    pub fn embedding(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 6 * n];
        for i in 0..n {
            for (c, v) in self.plucker(i).into_iter().enumerate() {
                out[c * n + i] = v;
            }
        }
        out
    }
}

pub fn ray_map(camera: &Camera) -> RayMap {
    let n = camera.width * camera.height;
    let mut origins = Vec::with_capacity(n);
    let mut directions = Vec::with_capacity(n);
    for v in 0..camera.height {
        for u in 0..camera.width {
            origins.push(camera.position);
            directions.push(camera.pixel_direction(u as f64 + 0.5, v as f64 + 0.5));
        }
    }
    RayMap {
        width: camera.width,
        height: camera.height,
        origins,
        directions,
    }
}

/// Orbit rig shared by the training views, GT renders and prior normal maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub fov_deg: f64,
    pub radius: f64,
    /// Elevation band for the random views, degrees.
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            fov_deg: 50.0,
            radius: 2.0,
            elevation_min_deg: -10.0,
            elevation_max_deg: 30.0,
        }
    }
}

impl RigConfig {
    pub fn camera(&self, azimuth_deg: f64, elevation_deg: f64, res: usize) -> Result<Camera> {
        make_orbit_camera(azimuth_deg, elevation_deg, self.radius, self.fov_deg, (res, res))
    }

    pub fn record(&self, azimuth_deg: f64, elevation_deg: f64, res: usize) -> CameraRecord {
        CameraRecord {
            azimuth_deg,
            elevation_deg,
            radius: self.radius,
            fov_deg: self.fov_deg,
            width: res,
            height: res,
        }
    }
}

pub const ORTHOGONAL_AZIMUTHS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];

/// Eight views: four orthogonal (views 0–3) and four random (views 4–7).
#[derive(Clone, Debug)]
pub struct TrainingViews {
    pub records: Vec<CameraRecord>,
    pub cameras: Vec<Camera>,
    /// Index (0..4) of the orthogonal view used as network input.
    pub input_index: usize,
}

impl TrainingViews {
    /// Orthogonal view indices relative to the input: front, back, left, right.
    pub fn relative_orthogonal(&self) -> [usize; 4] {
        let i = self.input_index;
        [i, (i + 2) % 4, (i + 1) % 4, (i + 3) % 4]
    }
}

pub fn sample_training_views(seed: u64, rig: &RigConfig, res: usize) -> Result<TrainingViews> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<CameraRecord> = ORTHOGONAL_AZIMUTHS
        .iter()
        .map(|&az| rig.record(az, 0.0, res))
        .collect();
    for _ in 0..4 {
        let az = rng.gen_range(0.0..360.0);
        let el = if rig.elevation_max_deg > rig.elevation_min_deg {
            rng.gen_range(rig.elevation_min_deg..rig.elevation_max_deg)
        } else {
            rig.elevation_min_deg
        };
        records.push(rig.record(az, el, res));
    }
    let input_index = rng.gen_range(0..4);
    let cameras = records
        .iter()
        .map(|r| r.to_camera())
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingViews {
        records,
        cameras,
        input_index,
    })
}
