//! Finite-difference gradient suites for the tape ops and the rasterizer,
//! plus a brute-force reference renderer.
//!
//! Relative error per entry is `|a − n| / max(|a|, |n|, 1e-3 · max_i |n_i|)`
//! with central differences at step `h`. In the rasterizer suite an entry
//! whose difference at `h` and `h/2` disagree has a skip threshold or culling
//! edge inside its stencil; such entries are counted as excluded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::camera::{make_orbit_camera, Camera};
use crate::error::Result;
use crate::gaussian::{activate_on_tape, ActivationParams, FeatureKind, Gaussian, GaussianSet, RECORD_LEN};
use crate::render::{project, render, render_backward, RenderSettings};

pub const FD_STEP: f64 = 1e-4;
pub const AUTODIFF_TOLERANCE: f64 = 1e-4;
pub const RASTER_TOLERANCE: f64 = 1e-3;
/// Largest share of rasterizer entries that may straddle a discontinuity.
pub const MAX_EXCLUDED_SHARE: f64 = 0.05;
const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub failures: usize,
    pub excluded: usize,
    pub max_rel: f64,
    /// First few failing entries, for diagnostics.
    pub messages: Vec<String>,
}

impl SuiteReport {
    fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Default::default() }
    }

    pub fn passed(&self) -> bool {
        let total = (self.checked + self.excluded).max(1) as f64;
        self.failures == 0 && self.checked > 0 && self.excluded as f64 <= MAX_EXCLUDED_SHARE * total
    }

    fn merge(&mut self, case: CaseResult) {
        self.cases += 1;
        self.checked += case.checked;
        self.failures += case.failures;
        self.excluded += case.excluded;
        self.max_rel = self.max_rel.max(case.max_rel);
        for m in case.messages {
            if self.messages.len() < 8 {
                self.messages.push(m);
            }
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} cases, {} entries, {} failures, {} excluded, max rel {:.3e}",
            self.name, self.cases, self.checked, self.failures, self.excluded, self.max_rel
        )
    }
}

#[derive(Default)]
struct CaseResult {
    checked: usize,
    failures: usize,
    excluded: usize,
    max_rel: f64,
    messages: Vec<String>,
}

fn compare(
    label: &str,
    analytic: &[f64],
    numeric: &[f64],
    half: Option<&[f64]>,
    tol: f64,
) -> CaseResult {
    let inf = numeric.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut r = CaseResult::default();
    for i in 0..numeric.len() {
        if let Some(half) = half {
            if (half[i] - numeric[i]).abs() > 1e-4 * inf.max(1.0) {
                r.excluded += 1;
                continue;
            }
        }
        let (a, n) = (analytic[i], numeric[i]);
        let denom = a.abs().max(n.abs()).max(FLOOR * inf);
        let rel = if denom == 0.0 { 0.0 } else { (a - n).abs() / denom };
        r.checked += 1;
        r.max_rel = r.max_rel.max(rel);
        if rel > tol {
            r.failures += 1;
            r.messages.push(format!("{label} entry {i}: analytic {a:.9e} numeric {n:.9e} rel {rel:.3e}"));
        }
    }
    r
}

fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------- tape ops

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Box<Build>,
}

fn op(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), build: Box::new(build) }
}

fn op_cases() -> Vec<OpCase> {
    let act = ActivationParams::for_map(1.0, 12);
    vec![
        op("conv2d", &[&[2, 3, 5, 6], &[4, 3, 3, 3], &[4]], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        op("conv2d_stride2", &[&[1, 2, 7, 6], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        op("conv2d_1x1", &[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]], |t, v| t.conv2d(v[0], v[1], v[2], 1, 0)),
        op("bilinear_up", &[&[2, 2, 3, 4]], |t, v| t.bilinear_resize(v[0], 7, 5)),
        op("bilinear_down", &[&[1, 3, 5, 8]], |t, v| t.bilinear_resize(v[0], 2, 3)),
        op("silu", &[&[3, 7]], |t, v| Ok(t.silu(v[0]))),
        op("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5)),
        op("add", &[&[2, 5], &[2, 5]], |t, v| t.add(v[0], v[1])),
        op("sub", &[&[2, 5], &[2, 5]], |t, v| t.sub(v[0], v[1])),
        op("mul", &[&[2, 5], &[2, 5]], |t, v| t.mul(v[0], v[1])),
        op("concat_axis0", &[&[2, 3], &[1, 3], &[3, 3]], |t, v| t.concat(v, 0)),
        op("concat_channels", &[&[2, 1, 2, 3], &[2, 3, 2, 3]], |t, v| t.concat_channels(v)),
        op("slice", &[&[2, 5, 3]], |t, v| t.slice(v[0], 1, 1, 3)),
        op("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        op("mean_square", &[&[4, 3], &[4, 3]], |t, v| t.mean_square(v[0], v[1])),
        op("sum", &[&[2, 3], &[2, 3]], |t, v| {
            let a = t.mean_square(v[0], v[1])?;
            let b = t.mul(v[0], v[0])?;
            let z = t.constant(Tensor::zeros(&[2, 3]));
            let b = t.mean_square(b, z)?;
            t.sum(&[a, b])
        }),
        op("scale", &[&[5]], |t, v| Ok(t.scale(v[0], -1.7))),
        op("dot_const", &[&[2, 4]], |t, v| {
            let w = Tensor::from_f64(&[2, 4], &[0.5, -1.0, 2.0, 0.1, 0.3, 0.0, -0.7, 1.1])?;
            t.dot_const(v[0], &w)
        }),
        op("activate_color", &[&[1, RECORD_LEN, 3, 4]], move |t, v| activate_on_tape(t, v[0], FeatureKind::Color, act)),
        op("activate_direction", &[&[1, RECORD_LEN, 3, 4]], move |t, v| {
            activate_on_tape(t, v[0], FeatureKind::Direction, act)
        }),
    ]
}

/// Names of the tape ops covered by [`autodiff_suite`].
pub fn autodiff_op_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

fn check_op_case(case: &OpCase, seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = case.shapes.iter().map(|s| s.iter().product()).collect();
    // Kept inside the activation clamps.
    let x: Vec<f64> = (0..sizes.iter().sum()).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let split = |flat: &[f64]| -> Result<Vec<Tensor<f64>>> {
        let mut off = 0;
        case.shapes
            .iter()
            .zip(&sizes)
            .map(|(s, &n)| {
                let t = Tensor::from_f64(s, &flat[off..off + n]);
                off += n;
                t
            })
            .collect()
    };
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = split(&x)?.into_iter().map(|t| tape.leaf(t)).collect();
        let out = (case.build)(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let n_out: usize = probe.iter().product();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights = Tensor::from_f64(&probe, &weights)?;

    let forward = |flat: &[f64]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = split(flat)?.into_iter().map(|t| tape.leaf(t)).collect();
        let out = (case.build)(&mut tape, &vars)?;
        let loss = tape.dot_const(out, &weights)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = forward(&x)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::with_capacity(x.len());
    for (v, &n) in vars.iter().zip(&sizes) {
        match grads.get(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(n)),
        }
    }
    let f = |p: &[f64]| -> f64 {
        let (tape, _, loss) = forward(p).expect("forward succeeded once");
        tape.value(loss).item()
    };
    let numeric = central(&f, &x, FD_STEP);
    Ok(compare(&format!("{} seed {seed}", case.name), &analytic, &numeric, None, AUTODIFF_TOLERANCE))
}

/// Every tape op against central differences, `seeds` random inputs each.
pub fn autodiff_suite(seeds: usize) -> Result<Vec<SuiteReport>> {
    op_cases()
        .iter()
        .map(|case| {
            let mut report = SuiteReport::new(case.name);
            for seed in 0..seeds as u64 {
                report.merge(check_op_case(case, seed)?);
            }
            Ok(report)
        })
        .collect()
}

// ---------------------------------------------------------------- rasterizer

/// `n` Gaussians with centers in `[-spread, spread]³`, scales 0.06–0.2,
/// opacities 0.2–0.9 and random colors.
pub fn random_scene(seed: u64, n: usize, spread: f64) -> GaussianSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let mut q = [0.0; 4];
            for v in &mut q {
                *v = rng.gen_range(-1.0..1.0);
            }
            q[0] += 1.5;
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian {
                position: [0, 1, 2].map(|_| rng.gen_range(-spread..spread)),
                scale: [0, 1, 2].map(|_| rng.gen_range(0.06..0.2)),
                rotation: q.map(|v| v / norm),
                opacity: rng.gen_range(0.2..0.9),
                feature: [0, 1, 2].map(|_| rng.gen_range(0.0..1.0)),
            }
        })
        .collect();
    GaussianSet { kind: FeatureKind::Color, gaussians }
}

/// Global depth sort, every Gaussian at every pixel, no thresholds or tiles.
/// Returns the `3×H×W` image and the `H×W` alpha.
pub fn reference_render(set: &GaussianSet<f64>, cam: &Camera, bg: [f64; 3]) -> (Vec<f64>, Vec<f64>) {
    let mut proj = project(set, cam, &RenderSettings::default());
    proj.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let (w, h) = (cam.width, cam.height);
    let mut img = vec![0.0; 3 * w * h];
    let mut alpha = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for g in &proj {
                let wgt = g.opacity * g.power(p).min(0.0).exp();
                for k in 0..3 {
                    c[k] += g.feature[k] * wgt * t;
                }
                t *= 1.0 - wgt;
            }
            for k in 0..3 {
                img[k * w * h + y * w + x] = c[k] + bg[k] * t;
            }
            alpha[y * w + x] = 1.0 - t;
        }
    }
    (img, alpha)
}

fn raster_case(seed: u64) -> Result<CaseResult> {
    const RES: usize = 16;
    let set = random_scene(seed, 1 + seed as usize % 4, 0.35);
    let cam = make_orbit_camera(seed as f64 * 37.0 % 360.0, 5.0, 2.0, 50.0, (RES, RES))?;
    let s = RenderSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let ri: Vec<f64> = (0..3 * RES * RES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ra: Vec<f64> = (0..RES * RES).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |flat: &[f64]| {
        let st = GaussianSet::from_flat(FeatureKind::Color, flat).expect("flat records");
        let o = render(&st, &cam, [1.0; 3], &s);
        o.image.iter().zip(&ri).map(|(a, b)| a * b).sum::<f64>() + o.alpha.iter().zip(&ra).map(|(a, b)| a * b).sum::<f64>()
    };
    let out = render(&set, &cam, [1.0; 3], &s);
    let analytic = render_backward(&set, &out, &ri, &ra, &s)?;
    let flat = set.to_flat();
    let numeric = central(&loss, &flat, FD_STEP);
    let half = central(&loss, &flat, FD_STEP / 2.0);
    Ok(compare(&format!("scene {seed}"), &analytic, &numeric, Some(&half), RASTER_TOLERANCE))
}

/// All 14 record gradients of the rasterizer on `scenes` random scenes of
/// 1–4 Gaussians at 16×16.
pub fn raster_suite(scenes: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("rasterizer");
    for seed in 0..scenes as u64 {
        report.merge(raster_case(seed)?);
    }
    Ok(report)
}

/// Largest deviation of the tiled renderer from [`reference_render`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Equivalence {
    pub max_rgb: f64,
    pub max_alpha: f64,
    pub worst_seed: u64,
}

/// Scenes of 1–10 Gaussians spread over the visible frustum, rendered at 8×8.
pub fn tiling_equivalence(seeds: usize) -> Result<Equivalence> {
    let cam = make_orbit_camera(0.0, 0.0, 2.0, 50.0, (8, 8))?;
    let mut eq = Equivalence::default();
    for seed in 0..seeds as u64 {
        let set = random_scene(seed, 1 + seed as usize % 10, 0.8);
        let out = render(&set, &cam, [1.0; 3], &RenderSettings::default());
        let (img, alpha) = reference_render(&set, &cam, [1.0; 3]);
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let rgb = d(&out.image, &img);
        if rgb > eq.max_rgb {
            eq.worst_seed = seed;
        }
        eq.max_rgb = eq.max_rgb.max(rgb);
        eq.max_alpha = eq.max_alpha.max(d(&out.alpha, &alpha));
    }
    Ok(eq)
}

/// The autodiff suite at 20 seeds per op followed by the rasterizer suite on
/// 50 scenes.
pub fn run_all() -> Result<Vec<SuiteReport>> {
    let mut out = autodiff_suite(20)?;
    out.push(raster_suite(50)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_flags_wrong_gradients() {
        let r = compare("x", &[1.0, 2.0], &[1.0, 2.1], None, 1e-3);
        assert_eq!((r.checked, r.failures), (2, 1));
        let r = compare("x", &[1.0, 0.0], &[1.0, 1e-9], None, 1e-4);
        assert_eq!(r.failures, 0);
    }

    #[test]
    fn every_op_passes_a_few_seeds() {
        for r in autodiff_suite(3).unwrap() {
            assert!(r.passed(), "{}\n{:?}", r.summary(), r.messages);
        }
    }

    #[test]
    fn broken_backward_is_caught() {
        let case = op("bad_square", &[&[4]], |t, v| {
            let value = t.value(v[0]).clone();
            let mut sq = value.clone();
            for a in sq.data_mut() {
                *a *= *a;
            }
            // deliberately wrong: d(x²)/dx reported as x
            let bw = Box::new(move |g: &Tensor<f64>| {
                let mut out = value.clone();
                for (o, gi) in out.data_mut().iter_mut().zip(g.data()) {
                    *o *= gi;
                }
                vec![out]
            });
            Ok(t.custom("bad_square", &[v[0]], sq, bw))
        });
        let r = check_op_case(&case, 0).unwrap();
        assert!(r.failures > 0);
    }

    #[test]
    fn raster_cases_pass() {
        let r = raster_suite(4).unwrap();
        assert!(r.passed(), "{}\n{:?}", r.summary(), r.messages);
    }

    #[test]
    fn reference_matches_tiled_render_on_small_scenes() {
        let eq = tiling_equivalence(10).unwrap();
        assert!(eq.max_rgb <= 2.0 / 255.0, "{eq:?}");
    }
}
