//! Convolution kernels.
//!
//! Both entry points work on a zero-padded input whose rows are laid out with
//! stride [`Padded::stride`]. On x86-64 with AVX-512F they use register-blocked
//! direct kernels; elsewhere they fall back to one GEMM per kernel tap.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut2};

/// Time-axis block of the forward kernel (three 8-lane registers).
const T_BLOCK: usize = 24;

/// Zero-padded copy of a `[channels × T]` input, with `kernel / 2` zeros in
/// front and enough trailing zeros for full-width vector loads.
pub(crate) struct Padded {
    data: Vec<f64>,
    rows: usize,
    stride: usize,
    len: usize,
}

impl Padded {
    pub(crate) fn new(x: ArrayView2<f64>, kernel: usize) -> Padded {
        let (rows, len) = x.dim();
        let pad = (kernel - 1) / 2;
        // Room for the widest read: t + k + 16 lanes past the last output block.
        let stride = len.div_ceil(T_BLOCK) * T_BLOCK + kernel + T_BLOCK;
        let mut data = vec![0.0; rows * stride];
        for (r, row) in x.rows().into_iter().enumerate() {
            let dst = &mut data[r * stride + pad..r * stride + pad + len];
            for (d, &v) in dst.iter_mut().zip(row.iter()) {
                *d = v;
            }
        }
        Padded {
            data,
            rows,
            stride,
            len,
        }
    }

    fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.stride), &self.data).expect("padded layout")
    }
}

fn use_avx512() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `y[o,t] = bias[o] + Σ_{i,k} w[o,i,k]·xp[i,t+k]`.
pub(crate) fn conv_forward(
    weight: ArrayView3<f64>,
    bias: ArrayView1<f64>,
    xp: &Padded,
) -> Array2<f64> {
    let (out, inp, kernel) = weight.dim();
    assert_eq!(inp, xp.rows);
    let t = xp.len;
    let mut y = Array2::zeros((out, t));
    #[cfg(target_arch = "x86_64")]
    if use_avx512() {
        let w = weight.as_standard_layout();
        let w = w.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("fresh array");
        // SAFETY: AVX-512F support was checked at runtime; buffer extents are
        // asserted inside.
        unsafe { avx512::forward(w, out, inp, kernel, &xp.data, xp.stride, ys, t) };
        for (mut row, &b) in y.rows_mut().into_iter().zip(bias.iter()) {
            row += b;
        }
        return y;
    }
    for (mut row, &b) in y.rows_mut().into_iter().zip(bias.iter()) {
        row.fill(b);
    }
    let xv = xp.view();
    for k in 0..kernel {
        let w_k = weight.slice(s![.., .., k]);
        let x_k = xv.slice(s![.., k..k + t]);
        general_mat_mul(1.0, &w_k, &x_k, 1.0, &mut y);
    }
    y
}

/// `dw[o,i,k] = Σ_t g[o,t]·xp[i,t+k]`.
pub(crate) fn conv_weight_grad(grad: ArrayView2<f64>, xp: &Padded, kernel: usize) -> Array3<f64> {
    let (out, t) = grad.dim();
    assert_eq!(t, xp.len);
    let inp = xp.rows;
    let mut dw = Array3::zeros((out, inp, kernel));
    #[cfg(target_arch = "x86_64")]
    if use_avx512() {
        // Gradient rows padded with zeros to a whole number of vectors.
        let g_stride = t.div_ceil(8) * 8;
        let mut g = vec![0.0; out * g_stride];
        for (o, row) in grad.rows().into_iter().enumerate() {
            for (d, &v) in g[o * g_stride..o * g_stride + t].iter_mut().zip(row.iter()) {
                *d = v;
            }
        }
        let dws = dw.as_slice_mut().expect("fresh array");
        // SAFETY: AVX-512F support was checked at runtime; buffer extents are
        // asserted inside.
        unsafe { avx512::weight_grad(&g, g_stride, out, &xp.data, xp.stride, inp, kernel, dws) };
        return dw;
    }
    let xv = xp.view();
    for k in 0..kernel {
        let x_k = xv.slice(s![.., k..k + t]);
        let mut dw_k: ArrayViewMut2<f64> = dw.slice_mut(s![.., .., k]);
        general_mat_mul(1.0, &grad, &x_k.t(), 0.0, &mut dw_k);
    }
    dw
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::T_BLOCK;

    const O_BLOCK: usize = 4;
    const K_BLOCK: usize = 4;
    const T_CHUNK: usize = 512;

    /// Output tile of 4 channels × 24 samples held in 12 registers while
    /// sweeping every (input channel, tap) pair.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn forward(
        w: &[f64],
        out: usize,
        inp: usize,
        kernel: usize,
        xp: &[f64],
        stride: usize,
        y: &mut [f64],
        t: usize,
    ) {
        assert_eq!(w.len(), out * inp * kernel);
        assert!(xp.len() >= inp * stride);
        assert!(t.div_ceil(T_BLOCK) * T_BLOCK + kernel <= stride);
        assert_eq!(y.len(), out * t);
        let ik = inp * kernel;
        let mut buf = [0.0f64; T_BLOCK];
        let mut ob = 0;
        while ob < out {
            let rows = (out - ob).min(O_BLOCK);
            // Short tiles repeat the last row; the duplicates are discarded.
            let w0 = w.as_ptr().add(ob * ik);
            let w1 = w.as_ptr().add((ob + 1.min(rows - 1)) * ik);
            let w2 = w.as_ptr().add((ob + 2.min(rows - 1)) * ik);
            let w3 = w.as_ptr().add((ob + 3.min(rows - 1)) * ik);
            let mut tb = 0;
            while tb < t {
                let mut a00 = _mm512_setzero_pd();
                let mut a01 = _mm512_setzero_pd();
                let mut a02 = _mm512_setzero_pd();
                let mut a10 = _mm512_setzero_pd();
                let mut a11 = _mm512_setzero_pd();
                let mut a12 = _mm512_setzero_pd();
                let mut a20 = _mm512_setzero_pd();
                let mut a21 = _mm512_setzero_pd();
                let mut a22 = _mm512_setzero_pd();
                let mut a30 = _mm512_setzero_pd();
                let mut a31 = _mm512_setzero_pd();
                let mut a32 = _mm512_setzero_pd();
                for i in 0..inp {
                    let xrow = xp.as_ptr().add(i * stride + tb);
                    let off = i * kernel;
                    for k in 0..kernel {
                        let x0 = _mm512_loadu_pd(xrow.add(k));
                        let x1 = _mm512_loadu_pd(xrow.add(k + 8));
                        let x2 = _mm512_loadu_pd(xrow.add(k + 16));
                        let v0 = _mm512_set1_pd(*w0.add(off + k));
                        a00 = _mm512_fmadd_pd(v0, x0, a00);
                        a01 = _mm512_fmadd_pd(v0, x1, a01);
                        a02 = _mm512_fmadd_pd(v0, x2, a02);
                        let v1 = _mm512_set1_pd(*w1.add(off + k));
                        a10 = _mm512_fmadd_pd(v1, x0, a10);
                        a11 = _mm512_fmadd_pd(v1, x1, a11);
                        a12 = _mm512_fmadd_pd(v1, x2, a12);
                        let v2 = _mm512_set1_pd(*w2.add(off + k));
                        a20 = _mm512_fmadd_pd(v2, x0, a20);
                        a21 = _mm512_fmadd_pd(v2, x1, a21);
                        a22 = _mm512_fmadd_pd(v2, x2, a22);
                        let v3 = _mm512_set1_pd(*w3.add(off + k));
                        a30 = _mm512_fmadd_pd(v3, x0, a30);
                        a31 = _mm512_fmadd_pd(v3, x1, a31);
                        a32 = _mm512_fmadd_pd(v3, x2, a32);
                    }
                }
                let cols = (t - tb).min(T_BLOCK);
                let tiles = [
                    [a00, a01, a02],
                    [a10, a11, a12],
                    [a20, a21, a22],
                    [a30, a31, a32],
                ];
                for (r, tile) in tiles.iter().enumerate().take(rows) {
                    _mm512_storeu_pd(buf.as_mut_ptr(), tile[0]);
                    _mm512_storeu_pd(buf.as_mut_ptr().add(8), tile[1]);
                    _mm512_storeu_pd(buf.as_mut_ptr().add(16), tile[2]);
                    let base = (ob + r) * t + tb;
                    y[base..base + cols].copy_from_slice(&buf[..cols]);
                }
                tb += T_BLOCK;
            }
            ob += O_BLOCK;
        }
    }

    /// Gradient tile of 4 output channels × 4 taps of one input channel,
    /// reduced over time 8 samples at a time.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn weight_grad(
        g: &[f64],
        g_stride: usize,
        out: usize,
        xp: &[f64],
        stride: usize,
        inp: usize,
        kernel: usize,
        dw: &mut [f64],
    ) {
        assert_eq!(g.len(), out * g_stride);
        assert_eq!(g_stride % 8, 0);
        assert!(g_stride + kernel.div_ceil(K_BLOCK) * K_BLOCK <= stride);
        assert!(xp.len() >= inp * stride);
        assert_eq!(dw.len(), out * inp * kernel);
        let zero_row = vec![0.0f64; g_stride];
        // Time is processed in chunks so a tile's gradient rows stay in L1
        // while every input channel and tap sweeps over them.
        let mut t0 = 0;
        while t0 < g_stride {
            let t_end = (t0 + T_CHUNK).min(g_stride);
            let mut ob = 0;
            while ob < out {
                let rows = (out - ob).min(O_BLOCK);
                // Missing rows of a short tile read zeros.
                let row_ptr = |r: usize| {
                    if r < rows {
                        g.as_ptr().add((ob + r) * g_stride)
                    } else {
                        zero_row.as_ptr()
                    }
                };
                let (g0, g1, g2, g3) = (row_ptr(0), row_ptr(1), row_ptr(2), row_ptr(3));
                for i in 0..inp {
                    let mut kb = 0;
                    while kb < kernel {
                        let xrow = xp.as_ptr().add(i * stride + kb);
                        let mut acc = [_mm512_setzero_pd(); O_BLOCK * K_BLOCK];
                        let [mut c00, mut c01, mut c02, mut c03, mut c10, mut c11, mut c12, mut c13, mut c20, mut c21, mut c22, mut c23, mut c30, mut c31, mut c32, mut c33] =
                            acc;
                        let mut tt = t0;
                        while tt < t_end {
                            let x0 = _mm512_loadu_pd(xrow.add(tt));
                            let x1 = _mm512_loadu_pd(xrow.add(tt + 1));
                            let x2 = _mm512_loadu_pd(xrow.add(tt + 2));
                            let x3 = _mm512_loadu_pd(xrow.add(tt + 3));
                            let v = _mm512_loadu_pd(g0.add(tt));
                            c00 = _mm512_fmadd_pd(v, x0, c00);
                            c01 = _mm512_fmadd_pd(v, x1, c01);
                            c02 = _mm512_fmadd_pd(v, x2, c02);
                            c03 = _mm512_fmadd_pd(v, x3, c03);
                            let v = _mm512_loadu_pd(g1.add(tt));
                            c10 = _mm512_fmadd_pd(v, x0, c10);
                            c11 = _mm512_fmadd_pd(v, x1, c11);
                            c12 = _mm512_fmadd_pd(v, x2, c12);
                            c13 = _mm512_fmadd_pd(v, x3, c13);
                            let v = _mm512_loadu_pd(g2.add(tt));
                            c20 = _mm512_fmadd_pd(v, x0, c20);
                            c21 = _mm512_fmadd_pd(v, x1, c21);
                            c22 = _mm512_fmadd_pd(v, x2, c22);
                            c23 = _mm512_fmadd_pd(v, x3, c23);
                            let v = _mm512_loadu_pd(g3.add(tt));
                            c30 = _mm512_fmadd_pd(v, x0, c30);
                            c31 = _mm512_fmadd_pd(v, x1, c31);
                            c32 = _mm512_fmadd_pd(v, x2, c32);
                            c33 = _mm512_fmadd_pd(v, x3, c33);
                            tt += 8;
                        }
                        acc = [
                            c00, c01, c02, c03, c10, c11, c12, c13, c20, c21, c22, c23, c30, c31,
                            c32, c33,
                        ];
                        let taps = (kernel - kb).min(K_BLOCK);
                        for r in 0..rows {
                            for j in 0..taps {
                                dw[((ob + r) * inp + i) * kernel + kb + j] +=
                                    _mm512_reduce_add_pd(acc[r * K_BLOCK + j]);
                            }
                        }
                        kb += K_BLOCK;
                    }
                }
                ob += O_BLOCK;
            }
            t0 = t_end;
        }
    }
}
