//! Training objective: RGB/mask reconstruction over eight views, masked
//! normal-map supervision of the direction Gaussians, and a pluggable
//! perceptual distance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mesh::NormalMap;

/// Image distance used for the perceptual terms.
pub trait Perceptual: Send + Sync {
    fn name(&self) -> &str;

    /// Distance between two channel-first images of `shape = [C, H, W]`.
    fn distance(&self, a: &[f64], b: &[f64], shape: [usize; 3]) -> f64;

    /// Gradient of [`Perceptual::distance`] with respect to `a`.
    fn gradient(&self, a: &[f64], b: &[f64], shape: [usize; 3]) -> Vec<f64>;
}

/// Mean absolute difference of horizontal and vertical finite differences,
/// summed over an average-pooled image pyramid. Weight-free and deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientPyramid {
    pub levels: usize,
}

impl Default for GradientPyramid {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

fn pool2(d: &[f64], [c, h, w]: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                out[(ch * oh + y) * ow + x] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    (out, [c, oh, ow])
}

impl GradientPyramid {
    fn pyramid(&self, a: &[f64], b: &[f64], shape: [usize; 3]) -> Vec<(Vec<f64>, [usize; 3])> {
        let mut levels = vec![(a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>(), shape)];
        while levels.len() < self.levels {
            let (d, s) = levels.last().expect("non-empty");
            if s[1] < 2 || s[2] < 2 {
                break;
            }
            let next = pool2(d, *s);
            levels.push(next);
        }
        levels
    }
}

/// Visits every horizontal and vertical neighbour pair as
/// `(index, neighbour index, 1 / count of that direction)`.
fn for_each_pair(shape: [usize; 3], mut f: impl FnMut(usize, usize, f64)) {
    let [c, h, w] = shape;
    let nx = c * h * w.saturating_sub(1);
    let ny = c * h.saturating_sub(1) * w;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if x + 1 < w {
                    f(i, i + 1, 1.0 / nx as f64);
                }
                if y + 1 < h {
                    f(i, i + w, 1.0 / ny as f64);
                }
            }
        }
    }
}

impl Perceptual for GradientPyramid {
    fn name(&self) -> &str {
        "gradient-pyramid"
    }

    fn distance(&self, a: &[f64], b: &[f64], shape: [usize; 3]) -> f64 {
        let mut total = 0.0;
        for (d, s) in self.pyramid(a, b, shape) {
            for_each_pair(s, |i, j, wgt| total += wgt * (d[j] - d[i]).abs());
        }
        total
    }

    fn gradient(&self, a: &[f64], b: &[f64], shape: [usize; 3]) -> Vec<f64> {
        let levels = self.pyramid(a, b, shape);
        let mut carry: Vec<f64> = Vec::new();
        for (l, (d, s)) in levels.iter().enumerate().rev() {
            let mut g = vec![0.0; d.len()];
            for_each_pair(*s, |i, j, wgt| {
                let sign = (d[j] - d[i]).signum() * if d[j] == d[i] { 0.0 } else { 1.0 };
                g[j] += wgt * sign;
                g[i] -= wgt * sign;
            });
            if l + 1 < levels.len() {
                let [c, h, w] = *s;
                let (oh, ow) = (h / 2, w / 2);
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = 0.25 * carry[(ch * oh + y) * ow + x];
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                g[(ch * h + 2 * y + dy) * w + 2 * x + dx] += v;
                            }
                        }
                    }
                }
            }
            carry = g;
        }
        carry
    }
}

fn image_shape(img: &Image) -> [usize; 3] {
    [img.channels, img.height, img.width]
}

pub fn perceptual_distance(p: &dyn Perceptual, a: &Image, b: &Image) -> Result<f64> {
    if image_shape(a) != image_shape(b) {
        return Err(Error::config(format!(
            "perceptual inputs differ: {:?} vs {:?}",
            image_shape(a),
            image_shape(b)
        )));
    }
    let to64 = |i: &Image| i.data.iter().map(|&v| v as f64).collect::<Vec<_>>();
    Ok(p.distance(&to64(a), &to64(b), image_shape(a)))
}

/// Tape op: perceptual distance between `a` (`[1, C, H, W]`) and a fixed target.
pub fn perceptual_on_tape<T: Real>(
    tape: &mut Tape<T>,
    a: Var,
    target: &Tensor<T>,
    p: &dyn Perceptual,
) -> Result<Var> {
    let [b, c, h, w] = tape.value(a).dims4()?;
    if b != 1 || target.shape() != tape.shape(a) {
        return Err(Error::config(format!(
            "perceptual op needs matching [1, C, H, W] inputs, got {:?} and {:?}",
            tape.shape(a),
            target.shape()
        )));
    }
    let av: Vec<f64> = tape.value(a).data().iter().map(|v| v.as_f64()).collect();
    let bv: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let shape = [c, h, w];
    let d = p.distance(&av, &bv, shape);
    let grad: Vec<T> = p.gradient(&av, &bv, shape).into_iter().map(T::lit).collect();
    let backward = Box::new(move |g: &Tensor<T>| {
        let k = g.item();
        vec![Tensor::new(vec![1, c, h, w], grad.iter().map(|&v| v * k).collect()).expect("shape")]
    });
    Ok(tape.custom("perceptual", &[a], Tensor::scalar(T::lit(d)), backward))
}

fn image_tensor<T: Real>(img: &Image) -> Tensor<T> {
    Tensor::new(
        vec![1, img.channels, img.height, img.width],
        img.data.iter().map(|&v| T::lit(v as f64)).collect(),
    )
    .expect("image shape")
}

/// Reconstruction terms over the eight training views.
#[derive(Clone, Copy, Debug)]
pub struct RgbTerms {
    pub total: Var,
    pub mse: Var,
    pub mask: Var,
    pub perceptual: Var,
}

/// `mean_v [mse(rgb) + mse(alpha, mask)] + mean_v perceptual(rgb, gt)`.
/// Each rendered view is `[1, 4, H, W]` (RGB then alpha).
pub fn loss_rgb<T: Real>(
    tape: &mut Tape<T>,
    rendered: &[Var],
    gt_rgb: &[Image],
    gt_mask: &[Image],
    perceptual: &dyn Perceptual,
) -> Result<RgbTerms> {
    if rendered.len() != 8 || gt_rgb.len() != 8 || gt_mask.len() != 8 {
        return Err(Error::usage(format!(
            "loss_rgb needs 8 views, got {} renders, {} images, {} masks",
            rendered.len(),
            gt_rgb.len(),
            gt_mask.len()
        )));
    }
    let (mut mse, mut mask, mut perc) = (Vec::new(), Vec::new(), Vec::new());
    for v in 0..8 {
        let [_, c, h, w] = tape.value(rendered[v]).dims4()?;
        if c != 4 || image_shape(&gt_rgb[v]) != [3, h, w] || image_shape(&gt_mask[v]) != [1, h, w] {
            return Err(Error::config(format!(
                "view {v}: render {:?} does not match GT {:?} / mask {:?}",
                tape.shape(rendered[v]),
                image_shape(&gt_rgb[v]),
                image_shape(&gt_mask[v])
            )));
        }
        let rgb = tape.slice(rendered[v], 1, 0, 3)?;
        let alpha = tape.slice(rendered[v], 1, 3, 1)?;
        let target: Tensor<T> = image_tensor(&gt_rgb[v]);
        let gt = tape.constant(target.clone());
        let m = tape.constant(image_tensor(&gt_mask[v]));
        mse.push(tape.mean_square(rgb, gt)?);
        mask.push(tape.mean_square(alpha, m)?);
        perc.push(perceptual_on_tape(tape, rgb, &target, perceptual)?);
    }
    let eighth = T::lit(1.0 / 8.0);
    let mse = tape.sum(&mse)?;
    let mse = tape.scale(mse, eighth);
    let mask = tape.sum(&mask)?;
    let mask = tape.scale(mask, eighth);
    let perceptual = tape.sum(&perc)?;
    let perceptual = tape.scale(perceptual, eighth);
    let total = tape.sum(&[mse, mask, perceptual])?;
    Ok(RgbTerms {
        total,
        mse,
        mask,
        perceptual,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct NormTerms {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Var,
}

/// Normal-map loss over the back, left and right views (in that order).
pub fn loss_norm<T: Real>(
    tape: &mut Tape<T>,
    rendered: &[Var],
    gt: &[NormalMap],
    perceptual: &dyn Perceptual,
) -> Result<NormTerms> {
    if rendered.len() != 3 || gt.len() != 3 {
        return Err(Error::usage(format!(
            "loss_norm needs 3 views, got {} renders and {} maps",
            rendered.len(),
            gt.len()
        )));
    }
    norm_views(tape, rendered, gt, perceptual)
}

/// Normal-map loss over front, back, left and right.
pub fn loss_norm_four<T: Real>(
    tape: &mut Tape<T>,
    rendered: &[Var],
    gt: &[NormalMap],
    perceptual: &dyn Perceptual,
) -> Result<NormTerms> {
    if rendered.len() != 4 || gt.len() != 4 {
        return Err(Error::usage(format!(
            "four-view loss_norm needs 4 views, got {} renders and {} maps",
            rendered.len(),
            gt.len()
        )));
    }
    norm_views(tape, rendered, gt, perceptual)
}

/// Rendered directions (composited over zero) are encoded as
/// `(F + alpha) / 2`, i.e. `(n + 1) / 2` under full coverage, then masked
/// by the GT silhouette.
fn norm_views<T: Real>(
    tape: &mut Tape<T>,
    rendered: &[Var],
    gt: &[NormalMap],
    perceptual: &dyn Perceptual,
) -> Result<NormTerms> {
    let (mut mse, mut perc) = (Vec::new(), Vec::new());
    for (v, (&r, map)) in rendered.iter().zip(gt).enumerate() {
        let [_, c, h, w] = tape.value(r).dims4()?;
        if c != 4 || image_shape(&map.normals) != [3, h, w] || image_shape(&map.mask) != [1, h, w] {
            return Err(Error::config(format!(
                "normal view {v}: render {:?} does not match map {:?}",
                tape.shape(r),
                image_shape(&map.normals)
            )));
        }
        let feat = tape.slice(r, 1, 0, 3)?;
        let alpha = tape.slice(r, 1, 3, 1)?;
        let alpha3 = tape.concat_channels(&[alpha, alpha, alpha])?;
        let enc = tape.add(feat, alpha3)?;
        let enc = tape.scale(enc, T::lit(0.5));
        let mut mask3 = map.mask.data.clone();
        mask3.extend_from_slice(&map.mask.data);
        mask3.extend_from_slice(&map.mask.data);
        let mask3 = Image::from_data(3, h, w, mask3)?;
        let m = tape.constant(image_tensor(&mask3));
        let masked = tape.mul(enc, m)?;
        let target_img = Image::from_data(
            3,
            h,
            w,
            map.normals.data.iter().zip(&mask3.data).map(|(n, m)| n * m).collect(),
        )?;
        let target: Tensor<T> = image_tensor(&target_img);
        let t = tape.constant(target.clone());
        mse.push(tape.mean_square(masked, t)?);
        perc.push(perceptual_on_tape(tape, masked, &target, perceptual)?);
    }
    let inv = T::lit(1.0 / rendered.len() as f64);
    let mse = tape.sum(&mse)?;
    let mse = tape.scale(mse, inv);
    let perceptual = tape.sum(&perc)?;
    let perceptual = tape.scale(perceptual, inv);
    let total = tape.sum(&[mse, perceptual])?;
    Ok(NormTerms {
        total,
        mse,
        perceptual,
    })
}

/// `L_rgb + L_norm`, unweighted; `L_rgb` alone when the normal term is off.
pub fn loss_total<T: Real>(tape: &mut Tape<T>, rgb: Var, norm: Option<Var>) -> Result<Var> {
    match norm {
        Some(n) => tape.sum(&[rgb, n]),
        None => Ok(rgb),
    }
}

/// Scalar values of every term, as logged per iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rgb: f64,
    pub norm: f64,
    pub rgb_mse: f64,
    pub mask_mse: f64,
    pub rgb_perceptual: f64,
    pub norm_mse: f64,
    pub norm_perceptual: f64,
}

impl LossReport {
    pub fn collect<T: Real>(tape: &Tape<T>, total: Var, rgb: &RgbTerms, norm: Option<&NormTerms>) -> Self {
        let v = |x: Var| tape.value(x).item().as_f64();
        Self {
            total: v(total),
            rgb: v(rgb.total),
            norm: norm.map_or(0.0, |n| v(n.total)),
            rgb_mse: v(rgb.mse),
            mask_mse: v(rgb.mask),
            rgb_perceptual: v(rgb.perceptual),
            norm_mse: norm.map_or(0.0, |n| v(n.mse)),
            norm_perceptual: norm.map_or(0.0, |n| v(n.perceptual)),
        }
    }

    pub const CSV_COLUMNS: &'static str = "lf,lrgb,lnorm,rgb_mse,mask_mse,rgb_perc,norm_mse,norm_perc";

    pub fn csv_fields(&self) -> String {
        format!(
            "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.total,
            self.rgb,
            self.norm,
            self.rgb_mse,
            self.mask_mse,
            self.rgb_perceptual,
            self.norm_mse,
            self.norm_perceptual
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Image {
        let mut i = Image::new(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    i.set(ch, y, x, f(ch, y, x));
                }
            }
        }
        i
    }

    fn render_var(tape: &mut Tape<f64>, rgb: &Image, alpha: &Image) -> Var {
        let mut data: Vec<f64> = rgb.data.iter().map(|&v| v as f64).collect();
        data.extend(alpha.data.iter().map(|&v| v as f64));
        tape.leaf(Tensor::new(vec![1, 4, rgb.height, rgb.width], data).unwrap())
    }

    #[test]
    fn checkerboard_against_gray() {
        let a = img(1, 4, 4, |_, y, x| ((x + y) % 2) as f32);
        let b = Image::filled(1, 4, 4, 0.5);
        // level 0: every neighbour difference of (a - b) is ±1; coarser levels are flat
        let d = perceptual_distance(&GradientPyramid::default(), &a, &b).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perceptual_is_symmetric_and_zero_on_equal() {
        let p = GradientPyramid::default();
        let a = img(3, 8, 8, |c, y, x| ((c * 7 + y * 3 + x * x) % 11) as f32 / 11.0);
        let b = img(3, 8, 8, |c, y, x| ((c + y * x) % 5) as f32 / 5.0);
        assert_eq!(perceptual_distance(&p, &a, &a).unwrap(), 0.0);
        let ab = perceptual_distance(&p, &a, &b).unwrap();
        let ba = perceptual_distance(&p, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn perceptual_gradient_matches_differences() {
        let p = GradientPyramid::default();
        let shape = [2, 8, 8];
        let a: Vec<f64> = (0..128).map(|i| ((i * 37 % 17) as f64) / 17.0).collect();
        let b: Vec<f64> = (0..128).map(|i| ((i * 11 % 13) as f64) / 13.0 + 0.013).collect();
        let g = p.gradient(&a, &b, shape);
        let h = 1e-7;
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let fd = (p.distance(&ap, &b, shape) - p.distance(&am, &b, shape)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    fn eight(tape: &mut Tape<f64>, rgb: &Image, alpha: &Image) -> Vec<Var> {
        (0..8).map(|_| render_var(tape, rgb, alpha)).collect()
    }

    #[test]
    fn rgb_loss_is_zero_on_equality_and_counts_views() {
        let rgb = img(3, 4, 4, |c, y, x| (c + y + x) as f32 / 10.0);
        let mask = Image::filled(1, 4, 4, 1.0);
        let mut tape = Tape::new();
        let r = eight(&mut tape, &rgb, &mask);
        let gts = vec![rgb.clone(); 8];
        let masks = vec![mask.clone(); 8];
        let t = loss_rgb(&mut tape, &r, &gts, &masks, &GradientPyramid::default()).unwrap();
        assert_eq!(tape.value(t.total).item(), 0.0);
        let r7 = r[..7].to_vec();
        assert!(matches!(
            loss_rgb(&mut tape, &r7, &gts[..7], &masks[..7], &GradientPyramid::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_alpha_against_full_mask() {
        let rgb = img(3, 4, 4, |c, y, x| (c * y + x) as f32 / 12.0);
        let mut tape = Tape::new();
        let r = eight(&mut tape, &rgb, &Image::new(1, 4, 4));
        let t = loss_rgb(
            &mut tape,
            &r,
            &vec![rgb.clone(); 8],
            &vec![Image::filled(1, 4, 4, 1.0); 8],
            &GradientPyramid::default(),
        )
        .unwrap();
        assert_eq!(tape.value(t.mask).item(), 1.0);
        assert_eq!(tape.value(t.mse).item(), 0.0);
        assert_eq!(tape.value(t.total).item(), 1.0);
    }

    #[test]
    fn single_view_scalar_reference() {
        // one 2x2 view replicated eight times, so the mean equals the single-view value
        let rgb = img(3, 2, 2, |c, y, x| [0.1, 0.7, 0.4, 0.9][(c + 2 * y + x) % 4]);
        let alpha = img(1, 2, 2, |_, y, x| [0.2, 1.0, 0.5, 0.0][2 * y + x]);
        let gt = img(3, 2, 2, |c, y, x| [0.3, 0.3, 0.8, 0.1][(c + y + x) % 4]);
        let mask = img(1, 2, 2, |_, y, x| [1.0, 1.0, 0.0, 1.0][2 * y + x]);
        let mut mse = 0.0;
        for i in 0..12 {
            mse += ((rgb.data[i] - gt.data[i]) as f64).powi(2);
        }
        mse /= 12.0;
        let mut mm = 0.0;
        for i in 0..4 {
            mm += ((alpha.data[i] - mask.data[i]) as f64).powi(2);
        }
        mm /= 4.0;
        // pyramid on 2x2: level 0 only (level 1 is 1x1 without neighbours)
        let d: Vec<f64> = (0..12).map(|i| (rgb.data[i] - gt.data[i]) as f64).collect();
        let (mut hx, mut vy) = (0.0, 0.0);
        for c in 0..3 {
            let at = |y: usize, x: usize| d[c * 4 + y * 2 + x];
            hx += (at(0, 1) - at(0, 0)).abs() + (at(1, 1) - at(1, 0)).abs();
            vy += (at(1, 0) - at(0, 0)).abs() + (at(1, 1) - at(0, 1)).abs();
        }
        let perc = hx / 6.0 + vy / 6.0;
        let mut tape = Tape::new();
        let r = eight(&mut tape, &rgb, &alpha);
        let t = loss_rgb(&mut tape, &r, &vec![gt; 8], &vec![mask; 8], &GradientPyramid::default()).unwrap();
        assert!((tape.value(t.mse).item() - mse).abs() < 1e-7);
        assert!((tape.value(t.mask).item() - mm).abs() < 1e-7);
        assert!((tape.value(t.perceptual).item() - perc).abs() < 1e-7);
        assert!((tape.value(t.total).item() - (mse + mm + perc)).abs() < 1e-7);
    }

    fn normal_map(h: usize, w: usize, n: [f64; 3], masked: bool) -> NormalMap {
        let m = if masked { 1.0 } else { 0.0 };
        NormalMap {
            normals: img(3, h, w, |c, _, _| ((n[c] + 1.0) / 2.0) as f32 * m),
            mask: Image::filled(1, h, w, m),
        }
    }

    fn direction_render(tape: &mut Tape<f64>, h: usize, w: usize, n: [f64; 3], alpha: f64) -> Var {
        let mut data = Vec::new();
        for c in 0..3 {
            data.extend(std::iter::repeat(n[c] * alpha).take(h * w));
        }
        data.extend(std::iter::repeat(alpha).take(h * w));
        tape.leaf(Tensor::new(vec![1, 4, h, w], data).unwrap())
    }

    #[test]
    fn norm_loss_cases() {
        let n = [0.6, 0.0, 0.8];
        let p = GradientPyramid::default();
        let mut tape = Tape::new();
        let same: Vec<Var> = (0..3).map(|_| direction_render(&mut tape, 4, 4, n, 1.0)).collect();
        let maps = vec![normal_map(4, 4, n, true); 3];
        let t = loss_norm(&mut tape, &same, &maps, &p).unwrap();
        assert!(tape.value(t.total).item().abs() < 1e-7);

        let flipped: Vec<Var> = (0..3)
            .map(|_| direction_render(&mut tape, 4, 4, n.map(|v| -v), 1.0))
            .collect();
        let t = loss_norm(&mut tape, &flipped, &maps, &p).unwrap();
        let enc: Vec<f64> = maps[0].normals.data.iter().map(|&v| v as f64).collect();
        let oracle = enc.iter().map(|e| (2.0 * e - 1.0).powi(2)).sum::<f64>() / enc.len() as f64;
        assert!((tape.value(t.mse).item() - oracle).abs() < 1e-6);

        let empty: Vec<Var> = (0..3).map(|_| direction_render(&mut tape, 4, 4, n, 0.0)).collect();
        let bg = vec![normal_map(4, 4, n, false); 3];
        let t = loss_norm(&mut tape, &empty, &bg, &p).unwrap();
        assert_eq!(tape.value(t.total).item(), 0.0);

        assert!(matches!(loss_norm(&mut tape, &empty[..2], &bg[..2], &p), Err(Error::Usage(_))));
    }

    #[test]
    fn total_is_plain_sum_and_gradients_add() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(0.5));
        let b = tape.leaf(Tensor::scalar(0.25));
        let t = loss_total(&mut tape, a, Some(b)).unwrap();
        assert_eq!(tape.value(t).item(), 0.75);
        assert_eq!(loss_total(&mut tape, a, None).unwrap(), a);

        // shared parameter feeding both terms
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_f64(&[1, 1, 2, 2], &[0.3, -0.2, 0.9, 0.1]).unwrap());
        let k1 = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let k2 = Tensor::from_f64(&[1, 1, 2, 2], &[-1.0, 0.5, 0.0, 2.0]).unwrap();
        let l1 = tape.dot_const(w, &k1).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let l2 = tape.dot_const(sq, &k2).unwrap();
        let t = loss_total(&mut tape, l1, Some(l2)).unwrap();
        let g = tape.backward(t).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        for i in 0..4 {
            let s = g1.get(w).unwrap().data()[i] + g2.get(w).unwrap().data()[i];
            assert!((g.get(w).unwrap().data()[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_fields_match_columns() {
        let r = LossReport::default();
        assert_eq!(r.csv_fields().split(',').count(), LossReport::CSV_COLUMNS.split(',').count());
    }
}
