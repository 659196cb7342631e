//! im2col-based 2-D convolution kernels shared by the forward and backward
//! passes of `conv2d` and `conv_transpose2d`.

use crate::par::{self, Exec};
use crate::tensor::{gemm, gemm_at, gemm_bt};

/// Geometry of a convolution mapping a `h × w` image to `oh × ow`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { channels, h, w, k, stride, pad, oh, ow })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// `[C, H, W]` → `[C·k·k, OH·OW]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let l = g.col_len();
    let mut cols = vec![0.0; g.col_rows() * l];
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `[C·k·k, OH·OW]` back onto `[C, H, W]`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let l = g.col_len();
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sum_partials(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

/// Convolution forward: `x [N, C, H, W]`, `w [O, C, k, k]` → `[N, O, OH, OW]`.
pub fn conv_forward(exec: Exec, x: &[f64], n: usize, w: &[f64], out_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.channels * g.h * g.w;
    let out_sz = out_ch * g.col_len();
    let mut out = vec![0.0; n * out_sz];
    par::for_each_chunk(exec, &mut out, out_sz, |b, o| {
        let cols = im2col(&x[b * in_sz..(b + 1) * in_sz], g);
        gemm(Exec::Sequential, out_ch, g.col_rows(), g.col_len(), w, &cols, o);
    });
    out
}

/// Convolution backward: returns `(dx, dw)`.
pub fn conv_backward(exec: Exec, x: &[f64], n: usize, w: &[f64], out_ch: usize, g: &ConvGeom, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let in_sz = g.channels * g.h * g.w;
    let out_sz = out_ch * g.col_len();
    let wlen = out_ch * g.col_rows();
    let parts = par::map_range(exec, n, |b| {
        let cols = im2col(&x[b * in_sz..(b + 1) * in_sz], g);
        let d = &dout[b * out_sz..(b + 1) * out_sz];
        let mut dw = vec![0.0; wlen];
        gemm_bt(Exec::Sequential, out_ch, g.col_len(), g.col_rows(), d, &cols, &mut dw);
        let mut dcols = vec![0.0; g.col_rows() * g.col_len()];
        gemm_at(Exec::Sequential, out_ch, g.col_rows(), g.col_len(), w, d, &mut dcols);
        let mut dx = vec![0.0; in_sz];
        col2im(&dcols, g, &mut dx);
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(n * in_sz);
    let mut dws = Vec::with_capacity(n);
    for (a, b) in parts {
        dx.extend(a);
        dws.push(b);
    }
    (dx, sum_partials(dws, wlen))
}

/// Transposed convolution forward. `g` describes the adjoint convolution
/// from the `[C_out, OH, OW]` output down to the `[C_in, H, W]` input, with
/// `g.channels == C_out`, `(g.h, g.w) == (OH, OW)` and `(g.oh, g.ow) == (H, W)`.
/// Weight layout is `[C_in, C_out, k, k]`.
pub fn convt_forward(exec: Exec, x: &[f64], n: usize, w: &[f64], in_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let in_sz = in_ch * g.col_len();
    let out_sz = g.channels * g.h * g.w;
    let mut out = vec![0.0; n * out_sz];
    par::for_each_chunk(exec, &mut out, out_sz, |b, o| {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let mut cols = vec![0.0; g.col_rows() * g.col_len()];
        gemm_at(Exec::Sequential, in_ch, g.col_rows(), g.col_len(), w, xb, &mut cols);
        col2im(&cols, g, o);
    });
    out
}

/// Transposed convolution backward: returns `(dx, dw)`.
pub fn convt_backward(exec: Exec, x: &[f64], n: usize, w: &[f64], in_ch: usize, g: &ConvGeom, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let in_sz = in_ch * g.col_len();
    let out_sz = g.channels * g.h * g.w;
    let wlen = in_ch * g.col_rows();
    let parts = par::map_range(exec, n, |b| {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let dcols = im2col(&dout[b * out_sz..(b + 1) * out_sz], g);
        let mut dx = vec![0.0; in_sz];
        gemm(Exec::Sequential, in_ch, g.col_rows(), g.col_len(), w, &dcols, &mut dx);
        let mut dw = vec![0.0; wlen];
        gemm_bt(Exec::Sequential, in_ch, g.col_len(), g.col_rows(), xb, &dcols, &mut dw);
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(n * in_sz);
    let mut dws = Vec::with_capacity(n);
    for (a, b) in parts {
        dx.extend(a);
        dws.push(b);
    }
    (dx, sum_partials(dws, wlen))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_convolution_oracle() {
        let (c, h, w, o, k) = (2, 5, 6, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 13 % 17) as f64) / 17.0 - 0.4).collect();
        let wt: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 7 % 11) as f64) / 11.0 - 0.5).collect();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let g = ConvGeom::new(c, h, w, k, stride, pad).unwrap();
            let out = conv_forward(Exec::Sequential, &x, 1, &wt, o, &g);
            for oc in 0..o {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[((oc * c + ic) * k + ki) * k + kj] * x[(ic * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = out[(oc * g.oh + oy) * g.ow + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn transposed_is_adjoint() {
        // <conv(x), y> == <x, convT(y)> for the same geometry and weights.
        let (c_big, h, w, c_small, k) = (2, 8, 8, 3, 3);
        let g = ConvGeom::new(c_big, h, w, k, 2, 1).unwrap();
        let x: Vec<f64> = (0..c_big * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c_small * g.col_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let wt: Vec<f64> = (0..c_small * c_big * k * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let cx = conv_forward(Exec::Sequential, &x, 1, &wt, c_small, &g);
        let ty = convt_forward(Exec::Sequential, &y, 1, &wt, c_small, &g);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
