//! Forward and backward kernels for the heavier operations.

use crate::tensor::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls one image `(C, H, W)` into `(C*kh*kw, oh*ow)`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.plane();
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Scatter-adds columns back into image layout; adjoint of [`im2col`].
fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.plane();
    for ci in 0..g.c {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (patch, plane) = (g.patch(), g.plane());
    let mut out = vec![T::zero(); g.n * g.oc * plane];
    let mut col = vec![T::zero(); patch * plane];
    let img = g.c * g.h * g.w;
    for n in 0..g.n {
        let dst = &mut out[n * g.oc * plane..(n + 1) * g.oc * plane];
        if let Some(b) = b {
            for (o, &bo) in b.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].fill(bo);
            }
        }
        im2col(&x[n * img..(n + 1) * img], g, &mut col);
        gemm(g.oc, patch, plane, w, false, &col, false, T::one(), dst);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (patch, plane) = (g.patch(), g.plane());
    let img = g.c * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); g.n * img]);
    let mut dw = need.1.then(|| vec![T::zero(); g.oc * patch]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); g.oc];
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                let s = (n * g.oc + o) * plane;
                *acc += gout[s..s + plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut col = vec![T::zero(); patch * plane];
    for n in 0..g.n {
        let go = &gout[n * g.oc * plane..(n + 1) * g.oc * plane];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * img..(n + 1) * img], g, &mut col);
            gemm(g.oc, plane, patch, go, false, &col, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(patch, g.oc, plane, w, true, go, false, T::zero(), &mut col);
            col2im(&col, g, &mut dx[n * img..(n + 1) * img]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Per-channel batch statistics over `(N, H, W)`. Returns `(mean, biased var)`.
pub(crate) fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let m = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            s += x[off..off + hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            v += x[off..off + hw].iter().map(|&t| (t - mu) * (t - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}
