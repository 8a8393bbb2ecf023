//! Reverse pass of the rasterizer.

use super::{projection_jacobian, tile_rect, view_covariance, ProjectedGaussian, RenderOutput, RenderSettings, View};
use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::gaussian::{rotation_matrix, Gaussian, GaussianSet, FEATURE, OPACITY, POS, RECORD_LEN, ROT, SCALE};
use crate::par;

/// Loss gradient with respect to one projected Gaussian's screen quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScreenGrad<T> {
    pub mean: [T; 2],
    pub conic: [T; 3],
    pub opacity: T,
    pub feature: [T; 3],
}

impl<T: Real> ScreenGrad<T> {
    fn zero() -> Self {
        Self {
            mean: [T::zero(); 2],
            conic: [T::zero(); 3],
            opacity: T::zero(),
            feature: [T::zero(); 3],
        }
    }

    fn accumulate(&mut self, o: &Self) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.feature[i] += o.feature[i];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution<T> {
    slot: usize,
    weight: T,
    falloff: T,
    transmittance: T,
    d: [T; 2],
}

/// Replays the forward walk of one pixel and returns its contributors.
fn contributors<T: Real>(
    projected: &[ProjectedGaussian<T>],
    list: &[u32],
    traversed: usize,
    p: [T; 2],
    settings: &RenderSettings,
    out: &mut Vec<Contribution<T>>,
) {
    out.clear();
    let min_w = T::lit(settings.min_weight);
    let mut t = T::one();
    for (slot, &k) in list[..traversed].iter().enumerate() {
        let g = &projected[k as usize];
        let power = g.power(p);
        if power > T::zero() || power < g.skip_below {
            continue;
        }
        let falloff = power.exp();
        let w = g.opacity * falloff;
        if w < min_w {
            continue;
        }
        out.push(Contribution {
            slot,
            weight: w,
            falloff,
            transmittance: t,
            d: [p[0] - g.mean[0], p[1] - g.mean[1]],
        });
        t *= T::one() - w;
    }
}

fn tile_backward<T: Real>(
    out: &RenderOutput<T>,
    tile: usize,
    grad_image: &[T],
    grad_alpha: &[T],
    settings: &RenderSettings,
) -> Vec<ScreenGrad<T>> {
    let list = &out.tiles[tile];
    let mut local = vec![ScreenGrad::zero(); list.len()];
    if list.is_empty() {
        return local;
    }
    let (w, h) = (out.width, out.height);
    let pixels = w * h;
    let (x0, y0, x1, y1) = tile_rect(tile, w, h);
    let mut contrib = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let pix = y * w + x;
            let gc = [grad_image[pix], grad_image[pixels + pix], grad_image[2 * pixels + pix]];
            let ga = grad_alpha[pix];
            if gc.iter().all(|v| *v == T::zero()) && ga == T::zero() {
                continue;
            }
            let p = [T::lit(x as f64 + 0.5), T::lit(y as f64 + 0.5)];
            contributors(&out.projected, list, out.contributors[pix] as usize, p, settings, &mut contrib);
            // color and alpha of everything behind the current entry
            let mut behind = out.background;
            let mut behind_alpha = T::zero();
            for c in contrib.iter().rev() {
                let g = &out.projected[list[c.slot] as usize];
                let t = c.transmittance;
                let wt = c.weight;
                let mut dw = ga * t * (T::one() - behind_alpha);
                let sg = &mut local[c.slot];
                for ch in 0..3 {
                    dw += gc[ch] * t * (g.feature[ch] - behind[ch]);
                    sg.feature[ch] += gc[ch] * wt * t;
                }
                sg.opacity += dw * c.falloff;
                let dpower = dw * wt;
                let [a, b, cc] = g.conic;
                let [dx, dy] = c.d;
                sg.mean[0] += dpower * (a * dx + b * dy);
                sg.mean[1] += dpower * (b * dx + cc * dy);
                sg.conic[0] += dpower * (-T::lit(0.5) * dx * dx);
                sg.conic[1] += dpower * (-dx * dy);
                sg.conic[2] += dpower * (-T::lit(0.5) * dy * dy);
                for ch in 0..3 {
                    behind[ch] = g.feature[ch] * wt + (T::one() - wt) * behind[ch];
                }
                behind_alpha = wt + (T::one() - wt) * behind_alpha;
            }
        }
    }
    local
}

type Mat3<T> = [[T; 3]; 3];

fn matmul<T: Real, const N: usize, const K: usize, const M: usize>(
    a: &[[T; K]; N],
    b: &[[T; M]; K],
) -> [[T; M]; N] {
    let mut out = [[T::zero(); M]; N];
    for i in 0..N {
        for j in 0..M {
            out[i][j] = (0..K).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose<T: Real, const N: usize, const M: usize>(a: &[[T; M]; N]) -> [[T; N]; M] {
    let mut out = [[T::zero(); N]; M];
    for i in 0..N {
        for j in 0..M {
            out[j][i] = a[i][j];
        }
    }
    out
}

/// Chains a screen-space gradient back through the projection to the 14
/// record scalars of `g`.
pub fn project_backward<T: Real>(
    view_cam: &crate::camera::Camera,
    g: &Gaussian<T>,
    p: &ProjectedGaussian<T>,
    sg: &ScreenGrad<T>,
) -> [T; RECORD_LEN] {
    project_backward_view(&View::new(view_cam), g, p, sg)
}

pub(crate) fn project_backward_view<T: Real>(
    view: &View<T>,
    g: &Gaussian<T>,
    p: &ProjectedGaussian<T>,
    sg: &ScreenGrad<T>,
) -> [T; RECORD_LEN] {
    let mut out = [T::zero(); RECORD_LEN];
    out[OPACITY] = sg.opacity;
    out[FEATURE..FEATURE + 3].copy_from_slice(&sg.feature);

    let half = T::lit(0.5);
    // conic -> screen covariance
    let [ka, kb, kc] = p.conic;
    let k = [[ka, kb], [kb, kc]];
    let gk = [[sg.conic[0], half * sg.conic[1]], [half * sg.conic[1], sg.conic[2]]];
    let kgk = matmul(&matmul(&k, &gk), &k);
    let g2 = kgk.map(|r| r.map(|v| -v));

    // screen covariance -> camera covariance and Jacobian
    let t = p.view;
    let j = projection_jacobian(view, t);
    let rot = rotation_matrix(g.rotation);
    let s2 = g.scale.map(|s| s * s);
    let mut sigma: Mat3<T> = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            sigma[a][b] = (0..3).map(|m| rot[a][m] * s2[m] * rot[b][m]).sum();
        }
    }
    let v = view_covariance(view, &sigma);
    let gv = matmul(&matmul(&transpose(&j), &g2), &j);
    let gj = matmul(&matmul(&g2, &j), &v).map(|r| r.map(|x| x + x));

    // camera covariance -> world covariance -> scale and rotation
    let w = view.rot;
    let gs = matmul(&matmul(&transpose(&w), &gv), &w);
    let gr = matmul(&gs, &rot);
    for m in 0..3 {
        let rgr: T = (0..3).map(|a| rot[a][m] * gr[a][m]).sum();
        out[SCALE + m] = T::lit(2.0) * g.scale[m] * rgr;
    }
    let mut dr: Mat3<T> = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for m in 0..3 {
            dr[a][m] = T::lit(2.0) * gr[a][m] * s2[m];
        }
    }
    let dq = rotation_backward(g.rotation, &dr);
    out[ROT..ROT + 4].copy_from_slice(&dq);

    // mean and Jacobian -> camera-space center -> world position
    let [fx, fy] = view.focal;
    let iz = T::one() / t[2];
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let two = T::lit(2.0);
    let mut dt = [
        sg.mean[0] * fx * iz,
        sg.mean[1] * fy * iz,
        -sg.mean[0] * fx * t[0] * iz2 - sg.mean[1] * fy * t[1] * iz2,
    ];
    dt[0] += gj[0][2] * (-fx * iz2);
    dt[1] += gj[1][2] * (-fy * iz2);
    dt[2] += gj[0][0] * (-fx * iz2)
        + gj[0][2] * (two * fx * t[0] * iz3)
        + gj[1][1] * (-fy * iz2)
        + gj[1][2] * (two * fy * t[1] * iz3);
    for a in 0..3 {
        out[POS + a] = (0..3).map(|r| w[r][a] * dt[r]).sum();
    }
    out
}

/// Gradient of `R(q)` contracted with `dr`, for unnormalised `q = (w, x, y, z)`.
fn rotation_backward<T: Real>(q: [T; 4], dr: &Mat3<T>) -> [T; 4] {
    let [w, x, y, z] = q;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let d = |i: usize, j: usize| dr[i][j];
    let gw = two
        * (-z * d(0, 1) + y * d(0, 2) + z * d(1, 0) - x * d(1, 2) - y * d(2, 0) + x * d(2, 1));
    let gx = two * (y * d(0, 1) + z * d(0, 2) + y * d(1, 0) - w * d(1, 2) + z * d(2, 0) + w * d(2, 1))
        - four * x * (d(1, 1) + d(2, 2));
    let gy = two * (x * d(0, 1) + w * d(0, 2) + x * d(1, 0) + z * d(1, 2) - w * d(2, 0) + z * d(2, 1))
        - four * y * (d(0, 0) + d(2, 2));
    let gz = two * (-w * d(0, 1) + x * d(0, 2) + w * d(1, 0) + y * d(1, 2) + x * d(2, 0) + y * d(2, 1))
        - four * z * (d(0, 0) + d(1, 1));
    [gw, gx, gy, gz]
}

/// Per-Gaussian record gradients (N×14, set order) of a loss whose gradient
/// with respect to the rendered feature image (3×H×W) and alpha (H×W) is given.
pub fn render_backward<T: Real>(
    set: &GaussianSet<T>,
    out: &RenderOutput<T>,
    grad_image: &[T],
    grad_alpha: &[T],
    settings: &RenderSettings,
) -> Result<Vec<T>> {
    let pixels = out.width * out.height;
    if out.source_len != set.len() {
        return Err(Error::usage(format!(
            "forward buffers were produced for {} Gaussians, got {}",
            out.source_len,
            set.len()
        )));
    }
    if out.contributors.len() != pixels || out.final_transmittance.len() != pixels {
        return Err(Error::usage("render output lacks its forward buffers"));
    }
    if grad_image.len() != 3 * pixels || grad_alpha.len() != pixels {
        return Err(Error::usage(format!(
            "gradient sizes {} and {} do not match a {}x{} render",
            grad_image.len(),
            grad_alpha.len(),
            out.width,
            out.height
        )));
    }
    let per_tile = par::map_range(out.tiles.len(), |t| {
        tile_backward(out, t, grad_image, grad_alpha, settings)
    });
    let mut screen = vec![ScreenGrad::zero(); out.projected.len()];
    for (t, local) in per_tile.iter().enumerate() {
        for (slot, sg) in local.iter().enumerate() {
            screen[out.tiles[t][slot] as usize].accumulate(sg);
        }
    }
    let records = par::map_range(out.projected.len(), |k| {
        let p = &out.projected[k];
        project_backward_view(&out.view, &set.gaussians[p.index], p, &screen[k])
    });
    let mut grads = vec![T::zero(); set.len() * RECORD_LEN];
    for (p, rec) in out.projected.iter().zip(records) {
        grads[p.index * RECORD_LEN..(p.index + 1) * RECORD_LEN].copy_from_slice(&rec);
    }
    Ok(grads)
}
