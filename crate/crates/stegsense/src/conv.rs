//! Raw 2-D cross-correlation kernels shared by the graph ops.
//!
//! All three passes lower onto a single-threaded GEMM over per-sample
//! im2col patch matrices. Determinism contract: the GEMM's blocking is a
//! fixed function of the operand shapes and the col2im scatter runs in
//! (ci, kh, kw, oh, ow) order, so identical inputs give identical results
//! on every run. Samples never share an accumulation chain; duplicated
//! inputs produce bitwise-duplicated outputs.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = extent + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn patch_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Writes the patch matrix of one sample: row (ci, kh, kw), column (oh, ow),
/// out-of-image taps as zeros.
fn im2col(x: &[f64], col: &mut [f64], d: &ConvDims) {
    let mut rows = col.chunks_exact_mut(d.out_plane());
    for ci in 0..d.cin {
        let plane = &x[ci * d.in_plane()..][..d.in_plane()];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let dst = rows.next().unwrap();
                for oh in 0..d.ho {
                    let row = &mut dst[oh * d.wo..][..d.wo];
                    let ih = (oh * d.stride + kh).wrapping_sub(d.pad);
                    if ih >= d.h {
                        row.fill(0.0);
                        continue;
                    }
                    let xrow = &plane[ih * d.w..][..d.w];
                    if d.stride == 1 {
                        // Valid output columns: 0 <= ow + kw - pad < w.
                        let lo = d.pad.saturating_sub(kw).min(d.wo);
                        let hi = d.wo.min((d.w + d.pad).saturating_sub(kw)).max(lo);
                        row[..lo].fill(0.0);
                        if hi > lo {
                            row[lo..hi]
                                .copy_from_slice(&xrow[lo + kw - d.pad..hi + kw - d.pad]);
                        }
                        row[hi..].fill(0.0);
                    } else {
                        for (ow, v) in row.iter_mut().enumerate() {
                            let iw = (ow * d.stride + kw).wrapping_sub(d.pad);
                            *v = if iw < d.w { xrow[iw] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one sample's input plane.
fn col2im_add(gcol: &[f64], gx: &mut [f64], d: &ConvDims) {
    let mut rows = gcol.chunks_exact(d.out_plane());
    for ci in 0..d.cin {
        let plane = &mut gx[ci * d.in_plane()..][..d.in_plane()];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let src = rows.next().unwrap();
                for oh in 0..d.ho {
                    let ih = (oh * d.stride + kh).wrapping_sub(d.pad);
                    if ih >= d.h {
                        continue;
                    }
                    let srow = &src[oh * d.wo..][..d.wo];
                    let grow = &mut plane[ih * d.w..][..d.w];
                    if d.stride == 1 {
                        let lo = d.pad.saturating_sub(kw).min(d.wo);
                        let hi = d.wo.min((d.w + d.pad).saturating_sub(kw)).max(lo);
                        if hi > lo {
                            let gs = &mut grow[lo + kw - d.pad..hi + kw - d.pad];
                            for (g, s) in gs.iter_mut().zip(&srow[lo..hi]) {
                                *g += s;
                            }
                        }
                    } else {
                        for (ow, s) in srow.iter().enumerate() {
                            let iw = (ow * d.stride + kw).wrapping_sub(d.pad);
                            if iw < d.w {
                                grow[iw] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn view(m: usize, n: usize, data: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((m, n), data).expect("conv buffer shape")
}

fn view_mut(m: usize, n: usize, data: &mut [f64]) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((m, n), data).expect("conv buffer shape")
}

/// `out` must be zero-filled by the caller.
pub(crate) fn forward(x: &[f64], wt: &[f64], out: &mut [f64], d: ConvDims) {
    let (k, p, q) = (d.patch_rows(), d.in_plane(), d.out_plane());
    let mut col = vec![0.0; k * q];
    let wv = view(d.cout, k, wt);
    for n in 0..d.n {
        im2col(&x[n * d.cin * p..][..d.cin * p], &mut col, &d);
        general_mat_mul(
            1.0,
            &wv,
            &view(k, q, &col),
            0.0,
            &mut view_mut(d.cout, q, &mut out[n * d.cout * q..][..d.cout * q]),
        );
    }
}

/// Accumulates into `gx` on top of whatever it already holds.
pub(crate) fn grad_input(go: &[f64], wt: &[f64], gx: &mut [f64], d: ConvDims) {
    let (k, p, q) = (d.patch_rows(), d.in_plane(), d.out_plane());
    let mut gcol = vec![0.0; k * q];
    let wv = view(d.cout, k, wt);
    for n in 0..d.n {
        general_mat_mul(
            1.0,
            &wv.t(),
            &view(d.cout, q, &go[n * d.cout * q..][..d.cout * q]),
            0.0,
            &mut view_mut(k, q, &mut gcol),
        );
        col2im_add(&gcol, &mut gx[n * d.cin * p..][..d.cin * p], &d);
    }
}

/// Accumulates into `gw` on top of whatever it already holds.
pub(crate) fn grad_weight(go: &[f64], x: &[f64], gw: &mut [f64], d: ConvDims) {
    let (k, p, q) = (d.patch_rows(), d.in_plane(), d.out_plane());
    let mut col = vec![0.0; k * q];
    let mut gwv = view_mut(d.cout, k, gw);
    for n in 0..d.n {
        im2col(&x[n * d.cin * p..][..d.cin * p], &mut col, &d);
        general_mat_mul(
            1.0,
            &view(d.cout, q, &go[n * d.cout * q..][..d.cout * q]),
            &view(k, q, &col).t(),
            1.0,
            &mut gwv,
        );
    }
}
