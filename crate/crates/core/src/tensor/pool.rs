use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Max pooling; returns the output and, per output element, the flat input
/// index it was taken from (first maximum in scan order).
pub(crate) fn maxpool_forward<T: Real>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if kernel == 0 || stride == 0 {
        return Err(Error::Shape("maxpool: kernel and stride must be positive".into()));
    }
    if pad >= kernel {
        return Err(Error::Shape(format!("maxpool: padding {pad} must be below kernel {kernel}")));
    }
    if h + pad < kernel || w + pad < kernel || h + 2 * pad < kernel {
        return Err(Error::Shape(format!("maxpool: {h}x{w} input too small for kernel {kernel}")));
    }
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub(crate) fn upsample_forward<T: Real>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if scale == 0 {
        return Err(Error::Shape("upsample: scale must be positive".into()));
    }
    let (ho, wo) = (h * scale, w * scale);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..ho {
            let row = &plane[(y / scale) * w..(y / scale + 1) * w];
            for xo in 0..wo {
                out.push(row[xo / scale]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn upsample_backward<T: Real>(dy: &[T], in_shape: &[usize], scale: usize, dx: &mut [T]) {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h * scale, w * scale);
    for (plane, dplane) in dy.chunks_exact(ho * wo).zip(dx.chunks_exact_mut(h * w)) {
        for y in 0..ho {
            let drow = &mut dplane[(y / scale) * w..(y / scale + 1) * w];
            for (xo, &g) in plane[y * wo..(y + 1) * wo].iter().enumerate() {
                drow[xo / scale] += g;
            }
        }
    }
}
