//! Segmentation objectives on softmax probabilities and one-hot targets:
//! weighted cross entropy, Dice, their sum, and Tversky.
//!
//! Every loss is available as a pure function returning `(value, d value /
//! d probs)` and as a [`Graph`] node that back-propagates that gradient.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Lower clamp applied to probabilities before the logarithm.
pub const LOG_EPS: f64 = 1e-7;
/// Added to every ratio denominator.
pub const SMOOTH: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    DiceWce,
    #[default]
    Tversky,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice_wce" => Ok(LossKind::DiceWce),
            "tversky" => Ok(LossKind::Tversky),
            other => Err(Error::Config(format!("unknown loss `{other}` (dice_wce | tversky)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::DiceWce => "dice_wce",
            LossKind::Tversky => "tversky",
        })
    }
}

/// Prefactor convention of the Tversky sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TverskyForm {
    /// `-2/|C| * sum_c T_c`; a perfect prediction scores -2.
    #[default]
    Doubled,
    /// `-1/|C| * sum_c T_c`; a perfect prediction scores -1.
    Conventional,
}

impl FromStr for TverskyForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doubled" => Ok(TverskyForm::Doubled),
            "conventional" => Ok(TverskyForm::Conventional),
            other => Err(Error::Config(format!("unknown tversky form `{other}`"))),
        }
    }
}

impl TverskyForm {
    fn prefactor(self) -> f64 {
        match self {
            TverskyForm::Doubled => 2.0,
            TverskyForm::Conventional => 1.0,
        }
    }
}

/// Where cross-entropy class weights come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Weighting {
    /// Recomputed from each batch's pixel counts.
    #[default]
    PerBatch,
    /// Fixed weights, typically from whole-dataset counts.
    Fixed(ClassWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub tversky_form: TverskyForm,
    pub weighting: Weighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Tversky,
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            tversky_form: TverskyForm::Doubled,
            weighting: Weighting::PerBatch,
        }
    }
}

/// Inverse-frequency class weights `w_c = sum(x) / (C * x_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Classes with no pixels get weight 0, which drops them from the CE sum.
pub fn class_weights(pixel_counts: &[u64]) -> Result<ClassWeights> {
    let total: u64 = pixel_counts.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("class weights need at least one labeled pixel".into()));
    }
    let c = pixel_counts.len() as f64;
    let weights = pixel_counts.iter().map(|&x| if x == 0 { 0.0 } else { total as f64 / (c * x as f64) }).collect();
    Ok(ClassWeights { weights, counts: pixel_counts.to_vec() })
}

/// Per-class pixel counts of a one-hot `[N, C, H, W]` target.
pub fn pixel_counts<T: Real>(onehot: &Tensor<T>) -> Result<Vec<u64>> {
    let (n, c, h, w) = onehot.dims4()?;
    let hw = h * w;
    let mut counts = vec![0u64; c];
    for b in 0..n {
        for (ch, count) in counts.iter_mut().enumerate() {
            *count += onehot.data()[(b * c + ch) * hw..][..hw].iter().filter(|&&v| v > T::zero()).count() as u64;
        }
    }
    Ok(counts)
}

/// One-hot `[N, C, H, W]` encoding of a batch of label masks.
pub fn one_hot<T: Real>(masks: &[&LabelMask], num_classes: usize) -> Result<Tensor<T>> {
    let first = masks.first().ok_or_else(|| Error::Shape("one_hot of an empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let hw = h * w;
    let mut data = vec![T::zero(); masks.len() * num_classes * hw];
    for (b, m) in masks.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape("one_hot: masks differ in extent".into()));
        }
        for (p, &label) in m.data().iter().enumerate() {
            let label = label as usize;
            if label >= num_classes {
                return Err(Error::Invalid(format!("label {label} outside {num_classes} classes")));
            }
            data[(b * num_classes + label) * hw + p] = T::one();
        }
    }
    Tensor::new(&[masks.len(), num_classes, h, w], data)
}

/// Checks the probability/one-hot pairing every loss assumes.
pub fn check_soft_target<T: Real>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<()> {
    if probs.shape() != onehot.shape() {
        return Err(Error::Shape(format!("probabilities {:?} and target {:?} differ", probs.shape(), onehot.shape())));
    }
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let tol = if T::BYTES == 4 { 1e-4 } else { 1e-6 };
    for b in 0..n {
        for p in 0..hw {
            let (mut ps, mut ys) = (0.0, 0.0);
            for ch in 0..c {
                let k = (b * c + ch) * hw + p;
                ps += probs.data()[k].as_f64();
                let y = onehot.data()[k].as_f64();
                if y != 0.0 && y != 1.0 {
                    return Err(Error::Invalid(format!("target entry {y} is not 0 or 1")));
                }
                ys += y;
            }
            if (ps - 1.0).abs() > tol || ys != 1.0 {
                return Err(Error::Invalid(format!("pixel {p} of sample {b}: probability sum {ps}, target sum {ys}")));
            }
        }
    }
    Ok(())
}

/// Per-class sums needed by the overlap losses.
struct Overlap {
    inter: Vec<f64>,
    pred: Vec<f64>,
    truth: Vec<f64>,
}

fn overlap<T: Real>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<(Overlap, usize, usize)> {
    if probs.shape() != onehot.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", probs.shape(), onehot.shape())));
    }
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let mut o = Overlap { inter: vec![0.0; c], pred: vec![0.0; c], truth: vec![0.0; c] };
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for k in off..off + hw {
                let (p, y) = (probs.data()[k].as_f64(), onehot.data()[k].as_f64());
                o.inter[ch] += p * y;
                o.pred[ch] += p;
                o.truth[ch] += y;
            }
        }
    }
    Ok((o, c, hw))
}

/// `-(1/N) sum_n sum_c w_c y log(max(p, eps))` with N the pixel count of
/// the whole batch.
pub fn weighted_ce<T: Real>(probs: &Tensor<T>, onehot: &Tensor<T>, weights: &[f64]) -> Result<(f64, Vec<T>)> {
    if probs.shape() != onehot.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", probs.shape(), onehot.shape())));
    }
    let (n, c, h, w) = probs.dims4()?;
    if weights.len() != c {
        return Err(Error::Shape(format!("{} class weights for {c} classes", weights.len())));
    }
    let hw = h * w;
    let pixels = (n * hw) as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); probs.numel()];
    for b in 0..n {
        for (ch, &wc) in weights.iter().enumerate() {
            let off = (b * c + ch) * hw;
            for k in off..off + hw {
                let y = onehot.data()[k].as_f64();
                if y == 0.0 || wc == 0.0 {
                    continue;
                }
                let p = probs.data()[k].as_f64();
                let clamped = p.clamp(LOG_EPS, 1.0);
                loss -= wc * y * clamped.ln();
                if p > LOG_EPS && p <= 1.0 {
                    grad[k] = T::of(-wc * y / (p * pixels));
                }
            }
        }
    }
    Ok((loss / pixels, grad))
}

/// `-(2/|C|) sum_c sum(p y) / (sum p + sum y)`; -1 for a perfect prediction.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<(f64, Vec<T>)> {
    let (o, c, hw) = overlap(probs, onehot)?;
    let scale = -2.0 / c as f64;
    let mut loss = 0.0;
    let mut dinter = vec![0.0; c];
    let mut dden = vec![0.0; c];
    for ch in 0..c {
        let den = o.pred[ch] + o.truth[ch] + SMOOTH;
        loss += scale * o.inter[ch] / den;
        dinter[ch] = scale / den;
        dden[ch] = -scale * o.inter[ch] / (den * den);
    }
    let mut grad = vec![T::zero(); probs.numel()];
    for (k, g) in grad.iter_mut().enumerate() {
        let ch = (k / hw) % c;
        let y = onehot.data()[k].as_f64();
        *g = T::of(dinter[ch] * y + dden[ch]);
    }
    Ok((loss, grad))
}

/// `-(k/|C|) sum_c TP / (TP + alpha FP + beta FN)` with `k` set by `form`.
pub fn tversky<T: Real>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    alpha: f64,
    beta: f64,
    form: TverskyForm,
) -> Result<(f64, Vec<T>)> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!("tversky weights must be non-negative, got {alpha}, {beta}")));
    }
    let (o, c, hw) = overlap(probs, onehot)?;
    let scale = -form.prefactor() / c as f64;
    let mut loss = 0.0;
    let mut den = vec![0.0; c];
    for ch in 0..c {
        let fp = o.pred[ch] - o.inter[ch];
        let fn_ = o.truth[ch] - o.inter[ch];
        den[ch] = o.inter[ch] + alpha * fp + beta * fn_ + SMOOTH;
        loss += scale * o.inter[ch] / den[ch];
    }
    let mut grad = vec![T::zero(); probs.numel()];
    for (k, g) in grad.iter_mut().enumerate() {
        let ch = (k / hw) % c;
        let y = onehot.data()[k].as_f64();
        let dden = y + alpha * (1.0 - y) - beta * y;
        let d = den[ch];
        *g = T::of(scale * (y * d - o.inter[ch] * dden) / (d * d));
    }
    Ok((loss, grad))
}

/// Sum of weighted cross entropy and Dice.
pub fn dice_wce<T: Real>(probs: &Tensor<T>, onehot: &Tensor<T>, weights: &[f64]) -> Result<(f64, Vec<T>)> {
    let (ce, gce) = weighted_ce(probs, onehot, weights)?;
    let (dc, gdc) = dice_loss(probs, onehot)?;
    Ok((ce + dc, gce.into_iter().zip(gdc).map(|(a, b)| a + b).collect()))
}

/// Evaluates the configured objective on `probs` and records it on `g`.
pub fn loss_on_graph<T: Real>(g: &mut Graph<T>, probs: Var, onehot: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let p = g.value(probs);
    let (value, grad) = match cfg.kind {
        LossKind::Tversky => tversky(p, onehot, cfg.tversky_alpha, cfg.tversky_beta, cfg.tversky_form)?,
        LossKind::DiceWce => {
            let weights = match &cfg.weighting {
                Weighting::PerBatch => class_weights(&pixel_counts(onehot)?)?,
                Weighting::Fixed(w) => w.clone(),
            };
            dice_wce(p, onehot, &weights.weights)?
        }
    };
    Ok(g.loss_node(probs, T::of(value), grad))
}

/// Graph node for weighted cross entropy alone.
pub fn weighted_ce_on_graph<T: Real>(g: &mut Graph<T>, probs: Var, onehot: &Tensor<T>, weights: &[f64]) -> Result<Var> {
    let (value, grad) = weighted_ce(g.value(probs), onehot, weights)?;
    Ok(g.loss_node(probs, T::of(value), grad))
}

pub fn dice_on_graph<T: Real>(g: &mut Graph<T>, probs: Var, onehot: &Tensor<T>) -> Result<Var> {
    let (value, grad) = dice_loss(g.value(probs), onehot)?;
    Ok(g.loss_node(probs, T::of(value), grad))
}

pub fn tversky_on_graph<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    onehot: &Tensor<T>,
    alpha: f64,
    beta: f64,
    form: TverskyForm,
) -> Result<Var> {
    let (value, grad) = tversky(g.value(probs), onehot, alpha, beta, form)?;
    Ok(g.loss_node(probs, T::of(value), grad))
}
