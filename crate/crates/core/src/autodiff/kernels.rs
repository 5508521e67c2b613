//! Convolution and pooling kernels on `[batch, channels, height, width]`
//! buffers. Convolutions are stride 1 with "same" zero padding.

use crate::par;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }
    fn plane(&self) -> usize {
        self.height * self.width
    }
    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
    fn in_sample(&self) -> usize {
        self.in_channels * self.plane()
    }
    fn out_sample(&self) -> usize {
        self.out_channels * self.plane()
    }
}

/// Unfolds one sample into `[ci·k·k, h·w]` columns.
fn im2col<F: Real>(x: &[F], g: &ConvGeometry) -> Vec<F> {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad());
    let plane = g.plane();
    let mut col = vec![F::zero(); g.patch() * plane];
    for c in 0..g.in_channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst = &mut col[r * plane..(r + 1) * plane];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * w + ox] = src[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Folds `[ci·k·k, h·w]` columns back into one sample, summing overlaps.
fn col2im<F: Real>(col: &[F], g: &ConvGeometry) -> Vec<F> {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad());
    let plane = g.plane();
    let mut x = vec![F::zero(); g.in_sample()];
    for c in 0..g.in_channels {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let src = &col[r * plane..(r + 1) * plane];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[iy * w + ix as usize] = dst[iy * w + ix as usize] + src[oy * w + ox];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward<F: Real>(x: &[F], weight: &[F], g: &ConvGeometry) -> Vec<F> {
    let per_sample = par::map_range(g.batch, |s| {
        let xs = &x[s * g.in_sample()..(s + 1) * g.in_sample()];
        let col = im2col(xs, g);
        matmul(weight, &col, g.out_channels, g.patch(), g.plane())
    });
    per_sample.concat()
}

/// Returns `(d_input, d_weight)`. Weight gradients are computed per sample
/// and summed in sample order.
pub(crate) fn conv2d_backward<F: Real>(x: &[F], weight: &[F], grad_out: &[F], g: &ConvGeometry) -> (Vec<F>, Vec<F>) {
    let per_sample = par::map_range(g.batch, |s| {
        let xs = &x[s * g.in_sample()..(s + 1) * g.in_sample()];
        let gs = &grad_out[s * g.out_sample()..(s + 1) * g.out_sample()];
        let col = im2col(xs, g);
        let dw = matmul_nt(gs, &col, g.out_channels, g.plane(), g.patch());
        let dcol = matmul_tn(weight, gs, g.out_channels, g.patch(), g.plane());
        (col2im(&dcol, g), dw)
    });
    let mut dx = Vec::with_capacity(g.batch * g.in_sample());
    let mut dw = vec![F::zero(); weight.len()];
    for (dxs, dws) in per_sample {
        dx.extend_from_slice(&dxs);
        for (acc, v) in dw.iter_mut().zip(dws) {
            *acc = *acc + v;
        }
    }
    (dx, dw)
}

/// 2×2 average pooling, stride 2. `planes` = batch · channels.
pub(crate) fn avgpool2_forward<F: Real>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    let mut out = vec![F::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x0) = (2 * oy, 2 * ox);
                let s = src[y * w + x0] + src[y * w + x0 + 1] + src[(y + 1) * w + x0] + src[(y + 1) * w + x0 + 1];
                dst[oy * ow + ox] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward<F: Real>(grad_out: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * quarter;
                let (y, x0) = (2 * oy, 2 * ox);
                dst[y * w + x0] = v;
                dst[y * w + x0 + 1] = v;
                dst[(y + 1) * w + x0] = v;
                dst[(y + 1) * w + x0 + 1] = v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_copies_input() {
        // 3×3 kernel with a single centred one is the identity map.
        let g = ConvGeometry {
            batch: 2,
            in_channels: 1,
            out_channels: 1,
            height: 3,
            width: 4,
            kernel: 3,
        };
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let mut wt = vec![0.0; 9];
        wt[4] = 1.0;
        assert_eq!(conv2d_forward(&x, &wt, &g), x);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 2,
            out_channels: 3,
            height: 4,
            width: 5,
            kernel: 3,
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let wt: Vec<f64> = (0..54).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
        let out = conv2d_forward(&x, &wt, &g);
        for co in 0..3 {
            for y in 0..4i64 {
                for xx in 0..5i64 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    acc += wt[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x[ci * 20 + (iy * 5 + ix) as usize];
                                }
                            }
                        }
                    }
                    let got = out[co * 20 + (y * 5 + xx) as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn avgpool_averages_quads() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(avgpool2_forward(&x, 1, 2, 4), vec![3.5, 5.5]);
    }
}
