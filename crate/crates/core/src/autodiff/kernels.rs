//! Raw numeric kernels behind the tape ops. All images are NCHW.

use crate::autodiff::Real;
use crate::par;

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }
}

fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let npix = g.out_pixels();
    for ci in 0..g.in_channels {
        let plane = &input[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize - p + ky as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], out: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let npix = g.out_pixels();
    for ci in 0..g.in_channels {
        let plane = &mut out[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let in_sz = g.in_channels * g.height * g.width;
    let npix = g.out_pixels();
    let out_sz = g.out_channels * npix;
    let per_sample = par::map_range(g.batch, |b| {
        let mut cols = vec![T::zero(); g.patch() * npix];
        im2col(g, &input[b * in_sz..(b + 1) * in_sz], &mut cols);
        let mut out = vec![T::zero(); out_sz];
        for (co, plane) in out.chunks_mut(npix).enumerate() {
            plane.fill(bias[co]);
        }
        T::gemm(
            g.out_channels,
            g.patch(),
            npix,
            weight,
            (g.patch(), 1),
            &cols,
            (npix, 1),
            T::one(),
            &mut out,
            (npix, 1),
        );
        out
    });
    per_sample.concat()
}

/// Returns (grad_input, grad_weight, grad_bias).
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let in_sz = g.in_channels * g.height * g.width;
    let npix = g.out_pixels();
    let out_sz = g.out_channels * npix;
    let patch = g.patch();
    let per_sample = par::map_range(g.batch, |b| {
        let gout = &grad_out[b * out_sz..(b + 1) * out_sz];
        let mut cols = vec![T::zero(); patch * npix];
        im2col(g, &input[b * in_sz..(b + 1) * in_sz], &mut cols);
        // dW = gout · colsᵀ
        let mut gw = vec![T::zero(); g.out_channels * patch];
        T::gemm(
            g.out_channels,
            npix,
            patch,
            gout,
            (npix, 1),
            &cols,
            (1, npix),
            T::zero(),
            &mut gw,
            (patch, 1),
        );
        let gb: Vec<T> = gout.chunks(npix).map(|c| c.iter().copied().sum()).collect();
        // dcols = Wᵀ · gout
        T::gemm(
            patch,
            g.out_channels,
            npix,
            weight,
            (1, patch),
            gout,
            (npix, 1),
            T::zero(),
            &mut cols,
            (npix, 1),
        );
        let mut gi = vec![T::zero(); in_sz];
        col2im(g, &cols, &mut gi);
        (gi, gw, gb)
    });
    let mut grad_in = Vec::with_capacity(g.batch * in_sz);
    let mut grad_w = vec![T::zero(); g.out_channels * patch];
    let mut grad_b = vec![T::zero(); g.out_channels];
    for (gi, gw, gb) in per_sample {
        grad_in.extend_from_slice(&gi);
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in grad_b.iter_mut().zip(gb) {
            *a += b;
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Source taps for one axis of an align-corners-false bilinear resize:
/// `(i0, i1, w0, w1)` per output index.
pub fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn resize_forward<T: Real>(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    input: &[T],
) -> Vec<T> {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Real>(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    grad_out: &[T],
) -> Vec<T> {
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let mut gin = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let gi = &mut gin[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let g = go[oy * ow + ox];
                gi[y0 * w + x0] += g * wy0 * wx0;
                gi[y0 * w + x1] += g * wy0 * wx1;
                gi[y1 * w + x0] += g * wy1 * wx0;
                gi[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    gin
}

/// Per-(sample, group) statistics saved by the forward pass.
#[derive(Clone, Debug)]
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn group_norm_forward<T: Real>(
    [b, c, h, w]: [usize; 4],
    groups: usize,
    eps: T,
    input: &[T],
    gain: &[T],
    shift: &[T],
) -> (Vec<T>, GroupStats<T>) {
    let cpg = c / groups;
    let hw = h * w;
    let span = cpg * hw;
    let mut out = vec![T::zero(); input.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(b * groups),
        rstd: Vec::with_capacity(b * groups),
    };
    let n = T::lit(span as f64);
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cpg) * hw;
            let xs = &input[start..start + span];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for cl in 0..cpg {
                let ch = gi * cpg + cl;
                let (gm, sh) = (gain[ch], shift[ch]);
                let off = start + cl * hw;
                for i in off..off + hw {
                    out[i] = (input[i] - mean) * rstd * gm + sh;
                }
            }
        }
    }
    (out, stats)
}

/// Returns (grad_input, grad_gain, grad_shift).
pub(crate) fn group_norm_backward<T: Real>(
    [b, c, h, w]: [usize; 4],
    groups: usize,
    input: &[T],
    gain: &[T],
    stats: &GroupStats<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let hw = h * w;
    let span = cpg * hw;
    let n = T::lit(span as f64);
    let mut gi = vec![T::zero(); input.len()];
    let mut gg = vec![T::zero(); c];
    let mut gs = vec![T::zero(); c];
    for bi in 0..b {
        for g in 0..groups {
            let idx = bi * groups + g;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let start = (bi * c + g * cpg) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for cl in 0..cpg {
                let ch = g * cpg + cl;
                let off = start + cl * hw;
                for i in off..off + hw {
                    let xhat = (input[i] - mean) * rstd;
                    let go = grad_out[i];
                    gg[ch] += go * xhat;
                    gs[ch] += go;
                    let dxhat = go * gain[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m1 = sum_dxhat / n;
            let m2 = sum_dxhat_xhat / n;
            for cl in 0..cpg {
                let ch = g * cpg + cl;
                let off = start + cl * hw;
                for i in off..off + hw {
                    let xhat = (input[i] - mean) * rstd;
                    let dxhat = grad_out[i] * gain[ch];
                    gi[i] = rstd * (dxhat - m1 - xhat * m2);
                }
            }
        }
    }
    (gi, gg, gs)
}
