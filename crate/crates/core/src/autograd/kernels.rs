//! Forward and backward kernels for the differentiable primitives.
//!
//! All kernels work on NCHW row-major buffers and are sequential; the order of
//! every floating-point reduction is fixed, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
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

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects 4-d input and weight, got {x:?} and {w:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, wcin, kh, kw) = (w[0], w[1], w[2], w[3]);
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d input has {cin} channels, weight expects {wcin}"
            )));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one sample `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[cin, h, w]`.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.len() != g.cout {
            return Err(Error::dim(format!(
                "conv2d bias has {} entries, expected {}",
                b.len(),
                g.cout
            )));
        }
    }
    let plane = g.out_plane();
    let kl = g.patch_len();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut out = vec![T::zero(); g.n * out_sz];
    let mut cols = vec![T::zero(); kl * plane];
    for s in 0..g.n {
        im2col(&g, &x.data()[s * in_sz..(s + 1) * in_sz], &mut cols);
        let o = &mut out[s * out_sz..(s + 1) * out_sz];
        T::gemm(
            g.cout,
            kl,
            plane,
            T::one(),
            w.data(),
            kl as isize,
            1,
            &cols,
            plane as isize,
            1,
            T::zero(),
            o,
            plane as isize,
            1,
        );
        if let Some(b) = b {
            for (co, chunk) in o.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok((Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)?, g))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_w, want_b) = want;
    let plane = g.out_plane();
    let kl = g.patch_len();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut dx = want_x.then(|| vec![T::zero(); g.n * in_sz]);
    let mut dw = want_w.then(|| vec![T::zero(); g.cout * kl]);
    let db = want_b.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for s in 0..g.n {
            for (co, chunk) in dy[s * out_sz..(s + 1) * out_sz].chunks(plane).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); kl * plane];
    for s in 0..g.n {
        let dys = &dy[s * out_sz..(s + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[s * in_sz..(s + 1) * in_sz], &mut cols);
            // dW += dY (cout x plane) * cols^T (plane x kl)
            T::gemm(
                g.cout,
                plane,
                kl,
                T::one(),
                dys,
                plane as isize,
                1,
                &cols,
                1,
                plane as isize,
                T::one(),
                dw,
                kl as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T (kl x cout) * dY (cout x plane)
            T::gemm(
                kl,
                g.cout,
                plane,
                T::one(),
                w,
                1,
                kl as isize,
                dys,
                plane as isize,
                1,
                T::zero(),
                &mut cols,
                plane as isize,
                1,
            );
            col2im(g, &cols, &mut dx[s * in_sz..(s + 1) * in_sz]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Iterate `(n, c)` planes of an NCHW buffer as `(channel, slice)`.
pub(crate) fn channel_planes<T>(data: &[T], c: usize, plane: usize) -> impl Iterator<Item = (usize, &[T])> {
    data.chunks(plane).enumerate().map(move |(i, p)| (i % c, p))
}

pub(crate) fn nchw(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::dim(format!("{op} expects [N,C,H,W], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

/// Per-channel sums of `a` and of `a*b` over N, H, W.
pub(crate) fn channel_sums<T: Real>(a: &[T], b: &[T], c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut s = vec![T::zero(); c];
    let mut sp = vec![T::zero(); c];
    for (i, (pa, pb)) in a.chunks(plane).zip(b.chunks(plane)).enumerate() {
        let ch = i % c;
        let mut acc = T::zero();
        let mut accp = T::zero();
        for (&u, &v) in pa.iter().zip(pb) {
            acc += u;
            accp += u * v;
        }
        s[ch] += acc;
        sp[ch] += accp;
    }
    (s, sp)
}
