use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Running per-channel statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded into the running estimates.
    pub batches: u64,
}

impl<T: Real> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], batches: 0 }
    }
}

/// Saved context of a batch-norm forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Returns output, saved context and (in train mode) the batch mean and
/// unbiased variance for the running-statistics update.
pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<&BnStats<T>>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>, Option<(Vec<T>, Vec<T>)>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm: {c} channels but gamma/beta have {}/{} entries",
            gamma.len(),
            beta.len()
        )));
    }
    let hw = h * w;
    let m = n * hw;
    let data = x.data();
    let (mean, var, batch) = match stats {
        Some(s) => (s.mean.clone(), s.var.clone(), None),
        None => {
            if m < 2 {
                return Err(Error::Shape(format!("batchnorm: training needs at least 2 values per channel, got {m}")));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    s += data[(b * c + ch) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0f64;
                for b in 0..n {
                    ss += data[(b * c + ch) * hw..][..hw].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                }
                mean[ch] = T::of(mu);
                var[ch] = T::of(ss / m as f64);
            }
            let unbiased = var.iter().map(|&v| v * T::of(m as f64 / (m as f64 - 1.0))).collect();
            (mean.clone(), var, Some((mean, unbiased)))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (mu, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + hw {
                let xh = (data[i] - mu) * is;
                xhat[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }
    let saved = BnSaved { xhat, inv_std, train: stats.is_none() };
    Ok((Tensor::new(x.shape(), out)?, saved, batch))
}

pub(crate) fn backward<T: Real>(
    shape: &[usize],
    saved: &BnSaved<T>,
    gamma: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::of((n * hw) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * saved.xhat[i];
            }
        }
    }
    if let Some(dg) = dgamma {
        dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &s)| *d += s);
    }
    if let Some(db) = dbeta {
        db.iter_mut().zip(&sum_dy).for_each(|(d, &s)| *d += s);
    }
    if let Some(dx) = dx {
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let k = gamma[ch] * saved.inv_std[ch];
                if saved.train {
                    let (sd, sdx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                    for i in off..off + hw {
                        dx[i] += k * (dy[i] - sd - saved.xhat[i] * sdx);
                    }
                } else {
                    for i in off..off + hw {
                        dx[i] += k * dy[i];
                    }
                }
            }
        }
    }
}
