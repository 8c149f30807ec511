//! 2-D cross-correlation via im2col + GEMM.

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
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
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = *input else {
            return Err(Error::Shape(format!("conv2d input must be NCHW, got {input:?}")));
        };
        let [cout, wcin, kh, kw] = *weight else {
            return Err(Error::Shape(format!("conv2d weight must be rank 4, got {weight:?}")));
        };
        if wcin != cin {
            return Err(Error::Shape(format!("conv2d: input has {cin} channels but weight {weight:?} expects {wcin}")));
        }
        if ![1, 3, 7].contains(&kh) || ![1, 3, 7].contains(&kw) {
            return Err(Error::Shape(format!("conv2d: unsupported kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} larger than padded input {ph}x{pw}")));
        }
        let ho = (ph - kh) / stride + 1;
        let wo = (pw - kw) / stride + 1;
        Ok(Self { n, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let l = g.l();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * l..][..l];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.l();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((c * g.kh + ky) * g.kw + kx) * l..][..l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::Shape(format!("conv2d: bias has {} entries for {} output channels", b.numel(), g.cout)));
        }
    }
    let (k, l) = (g.k(), g.l());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * l];
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
    for n in 0..g.n {
        let xs = &x.data()[n * in_len..(n + 1) * in_len];
        let cols: &[T] = if g.pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        let o = &mut out[n * g.cout * l..(n + 1) * g.cout * l];
        T::gemm(g.cout, k, l, T::one(), weight.data(), k as isize, 1, cols, l as isize, 1, T::zero(), o, l as isize, 1);
        if let Some(b) = bias {
            for (co, row) in o.chunks_exact_mut(l).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok((Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)?, g))
}

/// Accumulates gradients into whichever of `dx`, `dw`, `db` are present.
pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (k, l) = (g.k(), g.l());
    let in_len = g.cin * g.h * g.w;
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
    for n in 0..g.n {
        let dyn_ = &dy[n * g.cout * l..(n + 1) * g.cout * l];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dyn_.chunks_exact(l).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x.data()[n * in_len..(n + 1) * in_len];
            let cols: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            // dW += dY (cout x L) * col^T (L x K)
            T::gemm(g.cout, l, k, T::one(), dyn_, l as isize, 1, cols, 1, l as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            // dcol = W^T (K x cout) * dY (cout x L)
            if g.pointwise() {
                T::gemm(
                    k,
                    g.cout,
                    l,
                    T::one(),
                    weight.data(),
                    1,
                    k as isize,
                    dyn_,
                    l as isize,
                    1,
                    T::one(),
                    dxn,
                    l as isize,
                    1,
                );
            } else {
                T::gemm(
                    k,
                    g.cout,
                    l,
                    T::one(),
                    weight.data(),
                    1,
                    k as isize,
                    dyn_,
                    l as isize,
                    1,
                    T::zero(),
                    &mut col,
                    l as isize,
                    1,
                );
                col2im(&col, g, dxn);
            }
        }
    }
}
