//! Same-padded 3x3 cross-correlation lowered to a single GEMM per call.
//!
//! Activations are `[batch, ch, h, w]`. The column buffer is laid out as
//! `[in_ch * 9, batch * h * w]` so one matrix product covers the batch.

use crate::tensor::{gemm, Element, MatRef};

pub(crate) const KSIZE: usize = 3;
const TAPS: usize = KSIZE * KSIZE;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn cols(&self) -> usize {
        self.batch * self.hw()
    }

    fn rows(&self) -> usize {
        self.in_ch * TAPS
    }
}

fn im2col<T: Element>(x: &[T], d: &ConvDims) -> Vec<T> {
    let (h, w, hw, n) = (d.h, d.w, d.hw(), d.cols());
    let mut col = vec![T::zero(); d.rows() * n];
    for ci in 0..d.in_ch {
        for ky in 0..KSIZE {
            let dy = ky as isize - 1;
            for kx in 0..KSIZE {
                let dx = kx as isize - 1;
                let row = (ci * TAPS + ky * KSIZE + kx) * n;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for b in 0..d.batch {
                    let plane = &x[(b * d.in_ch + ci) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut col[row + b * hw + y * w..][..w];
                        let s0 = (x_lo as isize + dx) as usize;
                        dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Element>(col: &[T], d: &ConvDims, dx_out: &mut [T]) {
    let (h, w, hw, n) = (d.h, d.w, d.hw(), d.cols());
    for ci in 0..d.in_ch {
        for ky in 0..KSIZE {
            let dy = ky as isize - 1;
            for kx in 0..KSIZE {
                let dx = kx as isize - 1;
                let row = (ci * TAPS + ky * KSIZE + kx) * n;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for b in 0..d.batch {
                    let plane = &mut dx_out[(b * d.in_ch + ci) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &col[row + b * hw + y * w..][..w];
                        let s0 = (x_lo as isize + dx) as usize;
                        let dst = &mut plane[sy as usize * w + s0..][..x_hi - x_lo];
                        for (o, &g) in dst.iter_mut().zip(&src[x_lo..x_hi]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
}

/// `[out_ch, batch*hw]` -> `[batch, out_ch, hw]`
fn scatter_channels<T: Element>(tmp: &[T], d: &ConvDims, bias: Option<&[T]>) -> Vec<T> {
    let (hw, n) = (d.hw(), d.cols());
    let mut out = vec![T::zero(); d.batch * d.out_ch * hw];
    for co in 0..d.out_ch {
        let b0 = bias.map_or(T::zero(), |b| b[co]);
        for b in 0..d.batch {
            let src = &tmp[co * n + b * hw..][..hw];
            let dst = &mut out[(b * d.out_ch + co) * hw..][..hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v + b0;
            }
        }
    }
    out
}

/// `[batch, out_ch, hw]` -> `[out_ch, batch*hw]`
fn gather_channels<T: Element>(dy: &[T], d: &ConvDims) -> Vec<T> {
    let (hw, n) = (d.hw(), d.cols());
    let mut out = vec![T::zero(); d.out_ch * n];
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            out[co * n + b * hw..][..hw].copy_from_slice(&dy[(b * d.out_ch + co) * hw..][..hw]);
        }
    }
    out
}

pub(crate) fn forward<T: Element>(x: &[T], kernel: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let col = im2col(x, d);
    let mut tmp = vec![T::zero(); d.out_ch * d.cols()];
    gemm(
        MatRef::row_major(kernel, d.out_ch, d.rows()),
        MatRef::row_major(&col, d.rows(), d.cols()),
        T::zero(),
        &mut tmp,
    );
    scatter_channels(&tmp, d, bias)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    d: &ConvDims,
    want: [bool; 3],
) -> ConvGrads<T> {
    let [want_x, want_k, want_b] = want;
    let dy_cm = gather_channels(dy, d);
    let dy_mat = MatRef::row_major(&dy_cm, d.out_ch, d.cols());

    let kernel_grad = want_k.then(|| {
        let col = im2col(x, d);
        let mut dk = vec![T::zero(); d.out_ch * d.rows()];
        gemm(dy_mat, MatRef::row_major(&col, d.rows(), d.cols()).t(), T::zero(), &mut dk);
        dk
    });

    let input_grad = want_x.then(|| {
        let mut dcol = vec![T::zero(); d.rows() * d.cols()];
        gemm(
            MatRef::row_major(kernel, d.out_ch, d.rows()).t(),
            dy_mat,
            T::zero(),
            &mut dcol,
        );
        let mut dx = vec![T::zero(); x.len()];
        col2im_add(&dcol, d, &mut dx);
        dx
    });

    let bias_grad = want_b.then(|| {
        dy_cm
            .chunks_exact(d.cols())
            .map(|row| row.iter().copied().sum())
            .collect()
    });

    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}
