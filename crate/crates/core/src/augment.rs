//! Training-time augmentation, input normalization and test-time augmentation.
//!
//! Images are 8-bit RGB ([`RgbImage`]). Geometric transforms (flips) act on
//! the image and its mask together; photometric transforms touch only the
//! image. A pipeline run is split into [`draw_plan`], which consumes the
//! random stream in a fixed order, and [`apply_plan`], which is pure.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{hflip_buf, vflip_buf, InstanceMap, LabelMask};
use crate::nn::Network;
use crate::tensor::{Real, Tensor};

/// Closed interval `[lo, hi]` a parameter is drawn from uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const ZERO: Span = Span { lo: 0.0, hi: 0.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// `[-m, m]`
    pub fn symmetric(m: f64) -> Self {
        Self { lo: -m, hi: m }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            // still consume a draw so the stream layout does not depend on the range
            let _: f64 = rng.random();
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    None,
    Low,
    High,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Preset::None),
            "low" => Ok(Preset::Low),
            "high" => Ok(Preset::High),
            other => Err(Error::Config(format!("unknown augmentation preset `{other}` (none|low|high)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::None => "none",
            Preset::Low => "low",
            Preset::High => "high",
        })
    }
}

/// Parameter ranges of every transform. All intensities are in 8-bit units,
/// hue in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub preset: Preset,
    /// Probability that each transform fires; drawn independently per transform.
    pub apply_probability: f64,
    pub noise_mean: f64,
    /// Variance of the additive Gaussian noise.
    pub noise_var: Span,
    pub rgb_shift: Span,
    pub brightness: Span,
    pub contrast: Span,
    pub hue_shift: Span,
    /// Multiplier applied to sampled hue shifts.
    pub hue_scale: f64,
    pub sat_shift: Span,
    pub val_shift: Span,
}

impl AugmentationConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            apply_probability: 0.5,
            noise_mean: 0.0,
            noise_var: Span::ZERO,
            rgb_shift: Span::ZERO,
            brightness: Span::ZERO,
            contrast: Span::fixed(1.0),
            hue_shift: Span::ZERO,
            hue_scale: 1.0,
            sat_shift: Span::ZERO,
            val_shift: Span::ZERO,
        };
        match preset {
            Preset::None => Self { apply_probability: 0.0, ..base },
            Preset::Low => Self {
                noise_var: Span::new(0.4, 0.6),
                rgb_shift: Span::symmetric(5.0),
                brightness: Span::symmetric(10.0),
                contrast: Span::new(0.9, 1.1),
                hue_shift: Span::symmetric(2.0),
                sat_shift: Span::symmetric(3.0),
                val_shift: Span::symmetric(2.0),
                ..base
            },
            Preset::High => Self {
                noise_var: Span::fixed(1.0),
                rgb_shift: Span::symmetric(15.0),
                brightness: Span::symmetric(25.0),
                contrast: Span::new(0.8, 1.2),
                hue_shift: Span::symmetric(20.0),
                sat_shift: Span::symmetric(30.0),
                val_shift: Span::symmetric(20.0),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!("apply_probability {} outside [0, 1]", self.apply_probability)));
        }
        let spans = [
            ("noise_var", self.noise_var),
            ("rgb_shift", self.rgb_shift),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("hue_shift", self.hue_shift),
            ("sat_shift", self.sat_shift),
            ("val_shift", self.val_shift),
        ];
        for (name, s) in spans {
            if !s.is_valid() {
                return Err(Error::Config(format!("{name} range [{}, {}] is empty", s.lo, s.hi)));
            }
        }
        if self.noise_var.lo < 0.0 {
            return Err(Error::Config("noise variance must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self::preset(Preset::None)
    }
}

/// Anything that can be mirrored in lockstep with an image.
pub trait Flip: Clone {
    fn extent(&self) -> (usize, usize);
    fn hflip(&self) -> Self;
    fn vflip(&self) -> Self;
}

impl Flip for RgbImage {
    fn extent(&self) -> (usize, usize) {
        (self.width() as usize, self.height() as usize)
    }
    fn hflip(&self) -> Self {
        image::imageops::flip_horizontal(self)
    }
    fn vflip(&self) -> Self {
        image::imageops::flip_vertical(self)
    }
}

impl Flip for LabelMask {
    fn extent(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
    fn hflip(&self) -> Self {
        LabelMask::hflip(self)
    }
    fn vflip(&self) -> Self {
        LabelMask::vflip(self)
    }
}

impl Flip for InstanceMap {
    fn extent(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
    fn hflip(&self) -> Self {
        InstanceMap::hflip(self)
    }
    fn vflip(&self) -> Self {
        InstanceMap::vflip(self)
    }
}

fn check_extent<M: Flip>(image: &RgbImage, mask: &M) -> Result<()> {
    if image.extent() != mask.extent() {
        return Err(Error::Shape(format!("image is {:?} but mask is {:?}", image.extent(), mask.extent())));
    }
    Ok(())
}

pub fn hflip<M: Flip>(image: &RgbImage, mask: &M) -> Result<(RgbImage, M)> {
    check_extent(image, mask)?;
    Ok((image.hflip(), mask.hflip()))
}

pub fn vflip<M: Flip>(image: &RgbImage, mask: &M) -> Result<(RgbImage, M)> {
    check_extent(image, mask)?;
    Ok((image.vflip(), mask.vflip()))
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Adds i.i.d. `N(mean, var)` noise to every channel value.
pub fn gauss_noise<R: Rng>(image: &RgbImage, mean: f64, var: f64, rng: &mut R) -> RgbImage {
    if var <= 0.0 && mean == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(mean, var.max(0.0).sqrt()).expect("finite noise parameters");
    let mut out = image.clone();
    for v in out.iter_mut() {
        *v = to_u8(*v as f64 + normal.sample(rng));
    }
    out
}

/// Constant per-channel offset.
pub fn rgb_shift(image: &RgbImage, shift: [f64; 3]) -> RgbImage {
    let mut out = image.clone();
    for px in out.pixels_mut() {
        for (c, v) in px.0.iter_mut().enumerate() {
            *v = to_u8(*v as f64 + shift[c]);
        }
    }
    out
}

/// `contrast * (v - 128) + 128 + brightness`
pub fn brightness_contrast(image: &RgbImage, brightness: f64, contrast: f64) -> RgbImage {
    let mut out = image.clone();
    for v in out.iter_mut() {
        *v = to_u8(contrast * (*v as f64 - 128.0) + 128.0 + brightness);
    }
    out
}

/// RGB to (hue in degrees `[0, 360)`, saturation and value in `[0, 255]`).
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max * 255.0 };
    (h.rem_euclid(360.0), s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0);
    let s = (s / 255.0).clamp(0.0, 1.0);
    let v = v.clamp(0.0, 255.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [to_u8(r + m), to_u8(g + m), to_u8(b + m)]
}

/// Hue rotates modulo 360; saturation and value clamp to `[0, 255]`.
pub fn hsv_shift(image: &RgbImage, hue: f64, sat: f64, val: f64) -> RgbImage {
    let mut out = image.clone();
    for px in out.pixels_mut() {
        let (h, s, v) = rgb_to_hsv(px.0);
        px.0 = hsv_to_rgb(h + hue, (s + sat).clamp(0.0, 255.0), (v + val).clamp(0.0, 255.0));
    }
    out
}

/// Outcome of the random draws for one pipeline application.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub hflip: bool,
    pub vflip: bool,
    /// Noise variance and the seed of the per-pixel noise stream.
    pub noise: Option<(f64, u64)>,
    pub brightness_contrast: Option<(f64, f64)>,
    pub rgb_shift: Option<[f64; 3]>,
    pub hsv_shift: Option<(f64, f64, f64)>,
}

impl Plan {
    pub const IDENTITY: Plan =
        Plan { hflip: false, vflip: false, noise: None, brightness_contrast: None, rgb_shift: None, hsv_shift: None };

    /// Gate outcomes in pipeline order.
    pub fn gates(&self) -> [bool; 6] {
        [
            self.hflip,
            self.vflip,
            self.noise.is_some(),
            self.brightness_contrast.is_some(),
            self.rgb_shift.is_some(),
            self.hsv_shift.is_some(),
        ]
    }
}

/// Draws the six gates first, then the parameters of each transform, from a
/// stream seeded by `seed`.
pub fn draw_plan(config: &AugmentationConfig, seed: u64) -> Plan {
    if config.preset == Preset::None || config.apply_probability == 0.0 {
        return Plan::IDENTITY;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = config.apply_probability;
    let gates: [bool; 6] = std::array::from_fn(|_| rng.random::<f64>() < p);
    let noise = (config.noise_var.sample(&mut rng), rng.random::<u64>());
    let bc = (config.brightness.sample(&mut rng), config.contrast.sample(&mut rng));
    let rgb = [(); 3].map(|_| config.rgb_shift.sample(&mut rng));
    let hsv = (
        config.hue_shift.sample(&mut rng) * config.hue_scale,
        config.sat_shift.sample(&mut rng),
        config.val_shift.sample(&mut rng),
    );
    Plan {
        hflip: gates[0],
        vflip: gates[1],
        noise: gates[2].then_some(noise),
        brightness_contrast: gates[3].then_some(bc),
        rgb_shift: gates[4].then_some(rgb),
        hsv_shift: gates[5].then_some(hsv),
    }
}

pub fn apply_plan<M: Flip>(image: &RgbImage, mask: &M, plan: &Plan, noise_mean: f64) -> Result<(RgbImage, M)> {
    check_extent(image, mask)?;
    let (mut img, mut m) = (image.clone(), mask.clone());
    if plan.hflip {
        img = img.hflip();
        m = m.hflip();
    }
    if plan.vflip {
        img = img.vflip();
        m = m.vflip();
    }
    if let Some((var, seed)) = plan.noise {
        img = gauss_noise(&img, noise_mean, var, &mut ChaCha8Rng::seed_from_u64(seed));
    }
    if let Some((b, c)) = plan.brightness_contrast {
        img = brightness_contrast(&img, b, c);
    }
    if let Some(shift) = plan.rgb_shift {
        img = rgb_shift(&img, shift);
    }
    if let Some((h, s, v)) = plan.hsv_shift {
        img = hsv_shift(&img, h, s, v);
    }
    Ok((img, m))
}

/// Flips, noise, brightness/contrast, RGB shift, HSV shift; each gated.
pub fn apply_pipeline<M: Flip>(
    image: &RgbImage,
    mask: &M,
    config: &AugmentationConfig,
    seed: u64,
) -> Result<(RgbImage, M)> {
    apply_plan(image, mask, &draw_plan(config, seed), config.noise_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    Dataset,
    Pretraining,
}

/// Per-channel mean and standard deviation in `[0, 1]` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub source: StatsSource,
}

/// Below this a channel is considered constant.
const MIN_STD: f64 = 1e-6;

impl NormalizationStats {
    /// The usual ImageNet statistics.
    pub fn pretraining() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225], source: StatsSource::Pretraining }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s.is_finite() && s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Invalid(format!("normalization std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }

    /// Population statistics over every pixel of every image.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0u64;
        for img in images {
            for px in img.pixels() {
                for c in 0..3 {
                    let v = px.0[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += img.width() as u64 * img.height() as u64;
        }
        if n == 0 {
            return Err(Error::Invalid("cannot compute statistics of an empty dataset".into()));
        }
        let mean = sum.map(|s| s / n as f64);
        let std: [f64; 3] = std::array::from_fn(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt());
        if let Some(c) = std.iter().position(|&s| s < MIN_STD) {
            return Err(Error::Invalid(format!("channel {c} is constant across the dataset; std would be zero")));
        }
        Ok(Self { mean, std, source: StatsSource::Dataset })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        stats.validate()?;
        Ok(stats)
    }
}

/// `(v / 255 - mean) / std` per channel, as a `1 x 3 x H x W` tensor.
pub fn normalize<T: Real>(image: &RgbImage, stats: &NormalizationStats) -> Result<Tensor<T>> {
    stats.validate()?;
    let (w, h) = image.extent();
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::of((px.0[c] as f64 / 255.0 - stats.mean[c]) / stats.std[c]);
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

pub fn normalize_batch<T: Real>(images: &[&RgbImage], stats: &NormalizationStats) -> Result<Tensor<T>> {
    let parts = images.iter().map(|img| normalize(img, stats)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// Inverse of [`normalize`] for one sample, in 8-bit units before rounding.
pub fn denormalize_values<T: Real>(tensor: &Tensor<T>, stats: &NormalizationStats) -> Result<Vec<[f64; 3]>> {
    let (n, c, h, w) = tensor.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("denormalize expects 1x3xHxW, got {:?}", tensor.shape())));
    }
    let plane = h * w;
    let d = tensor.data();
    Ok((0..plane)
        .map(|i| std::array::from_fn(|c| (d[c * plane + i].as_f64() * stats.std[c] + stats.mean[c]) * 255.0))
        .collect())
}

pub fn denormalize<T: Real>(tensor: &Tensor<T>, stats: &NormalizationStats) -> Result<RgbImage> {
    let (_, _, h, w) = tensor.dims4()?;
    let values = denormalize_values(tensor, stats)?;
    let buf = values.into_iter().flat_map(|px| px.map(to_u8)).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches extent"))
}

/// Mirror every plane of an NCHW tensor left-right.
pub fn flip_tensor_w<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = t.dims4()?;
    let data = t.data().chunks(h * w).flat_map(|p| hflip_buf(p, w)).collect();
    Tensor::new(t.shape(), data)
}

/// Mirror every plane of an NCHW tensor top-bottom.
pub fn flip_tensor_h<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = t.dims4()?;
    let data = t.data().chunks(h * w).flat_map(|p| vflip_buf(p, w)).collect();
    Tensor::new(t.shape(), data)
}

/// A model that maps a normalized NCHW batch to per-pixel class probabilities.
pub trait Predictor<T: Real> {
    fn predict_probs(&self, input: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Predictor<T> for Network<T> {
    fn predict_probs(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Network::predict_probs(self, input)
    }
}

/// Average of the identity, horizontally and vertically flipped predictions,
/// each mapped back to the original orientation. With `tta` off this is a
/// single prediction.
pub fn tta_probs<T: Real, P: Predictor<T> + ?Sized>(model: &P, input: &Tensor<T>, tta: bool) -> Result<Tensor<T>> {
    let base = model.predict_probs(input)?;
    if !tta {
        return Ok(base);
    }
    let h = flip_tensor_w(&model.predict_probs(&flip_tensor_w(input)?)?)?;
    let v = flip_tensor_h(&model.predict_probs(&flip_tensor_h(input)?)?)?;
    let third = T::of(1.0 / 3.0);
    let data = base.data().iter().zip(h.data()).zip(v.data()).map(|((&a, &b), &c)| (a + b + c) * third).collect();
    Tensor::new(base.shape(), data)
}

/// Test-time-augmented probabilities of one image.
pub fn tta_predict<T: Real, P: Predictor<T> + ?Sized>(
    image: &RgbImage,
    model: &P,
    stats: &NormalizationStats,
) -> Result<Tensor<T>> {
    tta_probs(model, &normalize(image, stats)?, true)
}
