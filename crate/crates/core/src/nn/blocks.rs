//! Building blocks and their parameter initializers.
//!
//! Every block reads its parameters from a [`Forward`] under a dotted
//! prefix; the matching `init_*` function creates exactly those names.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DecoderWiring, Forward, ParamKind, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Convolution weight drawn from N(0, 2 / fan_in); optional zero bias.
pub fn init_conv<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cout: usize,
    cin: usize,
    kernel: usize,
    bias: bool,
    rng: &mut R,
) {
    let fan_in = cin * kernel * kernel;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..cout * fan_in).map(|_| T::of(normal.sample(rng))).collect();
    let w = Tensor::new(&[cout, cin, kernel, kernel], data).expect("conv weight shape");
    store.insert(format!("{prefix}.weight"), w, ParamKind::Learnable);
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::Learnable);
    }
}

/// gamma = 1, beta = 0, fresh running statistics.
pub fn init_bn<T: Real>(store: &mut ParameterStore<T>, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]), ParamKind::Learnable);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Learnable);
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer);
    store.insert(format!("{prefix}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer);
    store.insert(format!("{prefix}.batches"), Tensor::zeros(&[1]), ParamKind::Buffer);
}

fn init_shortcut<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    stride: usize,
    rng: &mut R,
) {
    if stride != 1 || cin != cout {
        init_conv(store, &format!("{prefix}.downsample.conv"), cout, cin, 1, false, rng);
        init_bn(store, &format!("{prefix}.downsample.bn"), cout);
    }
}

pub fn init_residual_block<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    stride: usize,
    rng: &mut R,
) {
    init_conv(store, &format!("{prefix}.conv1"), cout, cin, 3, false, rng);
    init_bn(store, &format!("{prefix}.bn1"), cout);
    init_conv(store, &format!("{prefix}.conv2"), cout, cout, 3, false, rng);
    init_bn(store, &format!("{prefix}.bn2"), cout);
    init_shortcut(store, prefix, cin, cout, stride, rng);
}

/// `planes` is the reduced width; the block emits `4 * planes` channels.
pub fn init_bottleneck_block<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cin: usize,
    planes: usize,
    stride: usize,
    rng: &mut R,
) {
    let cout = planes * 4;
    init_conv(store, &format!("{prefix}.conv1"), planes, cin, 1, false, rng);
    init_bn(store, &format!("{prefix}.bn1"), planes);
    init_conv(store, &format!("{prefix}.conv2"), planes, planes, 3, false, rng);
    init_bn(store, &format!("{prefix}.bn2"), planes);
    init_conv(store, &format!("{prefix}.conv3"), cout, planes, 1, false, rng);
    init_bn(store, &format!("{prefix}.bn3"), cout);
    init_shortcut(store, prefix, cin, cout, stride, rng);
}

/// Parameters of an scSE block over `channels` with cSE reduction `r`.
pub fn init_attention<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    channels: usize,
    r: usize,
    rng: &mut R,
) -> Result<()> {
    if r == 0 || !channels.is_multiple_of(r) {
        return Err(Error::Config(format!("{channels} channels not divisible by se_reduction {r}")));
    }
    init_conv(store, &format!("{prefix}.cse.reduce"), channels / r, channels, 1, true, rng);
    init_conv(store, &format!("{prefix}.cse.expand"), channels, channels / r, 1, true, rng);
    init_conv(store, &format!("{prefix}.sse.conv"), 1, channels, 1, true, rng);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn init_decoder_block<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cin: usize,
    cskip: usize,
    cout: usize,
    r: usize,
    wiring: DecoderWiring,
    rng: &mut R,
) -> Result<()> {
    let fused = cin + cskip;
    match wiring {
        DecoderWiring::AttentionFirst => {
            init_attention(store, &format!("{prefix}.attention"), fused, r, rng)?;
            init_conv(store, &format!("{prefix}.conv"), cout, fused, 3, false, rng);
            init_bn(store, &format!("{prefix}.bn"), cout);
        }
        DecoderWiring::AttentionLast => {
            init_conv(store, &format!("{prefix}.conv"), cout, fused, 3, false, rng);
            init_bn(store, &format!("{prefix}.bn"), cout);
            init_attention(store, &format!("{prefix}.attention"), cout, r, rng)?;
        }
    }
    Ok(())
}

pub fn init_segmentation_head<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    channels: usize,
    num_classes: usize,
    r: usize,
    rng: &mut R,
) -> Result<()> {
    init_conv(store, &format!("{prefix}.conv1"), channels, channels, 3, false, rng);
    init_bn(store, &format!("{prefix}.bn"), channels);
    init_attention(store, &format!("{prefix}.attention"), channels, r, rng)?;
    init_conv(store, &format!("{prefix}.conv2"), num_classes, channels, 3, true, rng);
    Ok(())
}

fn shortcut<T: Real>(f: &mut Forward<'_, T>, x: Var, prefix: &str, stride: usize) -> Result<Var> {
    let conv = format!("{prefix}.downsample.conv");
    if f.has(&format!("{conv}.weight")) {
        let s = f.conv(x, &conv, stride, 0)?;
        f.bn(s, &format!("{prefix}.downsample.bn"))
    } else {
        Ok(x)
    }
}

/// `relu(bn(conv3x3(relu(bn(conv3x3(x, stride))))) + shortcut(x))`
pub fn residual_block<T: Real>(f: &mut Forward<'_, T>, x: Var, prefix: &str, stride: usize) -> Result<Var> {
    let h = f.conv(x, &format!("{prefix}.conv1"), stride, 1)?;
    let h = f.bn(h, &format!("{prefix}.bn1"))?;
    let h = f.g.relu(h);
    let h = f.conv(h, &format!("{prefix}.conv2"), 1, 1)?;
    let h = f.bn(h, &format!("{prefix}.bn2"))?;
    let s = shortcut(f, x, prefix, stride)?;
    let sum = f.g.add(h, s)?;
    Ok(f.g.relu(sum))
}

/// 1x1 reduce, 3x3 (carrying the stride), 1x1 expand, additive shortcut.
pub fn bottleneck_block<T: Real>(f: &mut Forward<'_, T>, x: Var, prefix: &str, stride: usize) -> Result<Var> {
    let h = f.conv(x, &format!("{prefix}.conv1"), 1, 0)?;
    let h = f.bn(h, &format!("{prefix}.bn1"))?;
    let h = f.g.relu(h);
    let h = f.conv(h, &format!("{prefix}.conv2"), stride, 1)?;
    let h = f.bn(h, &format!("{prefix}.bn2"))?;
    let h = f.g.relu(h);
    let h = f.conv(h, &format!("{prefix}.conv3"), 1, 0)?;
    let h = f.bn(h, &format!("{prefix}.bn3"))?;
    let s = shortcut(f, x, prefix, stride)?;
    let sum = f.g.add(h, s)?;
    Ok(f.g.relu(sum))
}

/// Channel excitation: `x * sigmoid(expand(relu(reduce(gap(x)))))`.
pub fn cse<T: Real>(f: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let s = f.g.global_avg_pool(x)?;
    let s = f.conv(s, &format!("{prefix}.cse.reduce"), 1, 0)?;
    let s = f.g.relu(s);
    let s = f.conv(s, &format!("{prefix}.cse.expand"), 1, 0)?;
    let s = f.g.sigmoid(s);
    f.g.mul(x, s)
}

/// Spatial excitation: `x * sigmoid(conv1x1(x))` with a single-channel gate.
pub fn sse<T: Real>(f: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let q = f.conv(x, &format!("{prefix}.sse.conv"), 1, 0)?;
    let q = f.g.sigmoid(q);
    f.g.mul(x, q)
}

pub fn scse<T: Real>(f: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let c = cse(f, x, prefix)?;
    let s = sse(f, x, prefix)?;
    f.g.add(c, s)
}

/// Upsamples `x` by 2, fuses the encoder skip by channel concatenation, and
/// refines with attention and conv3x3-bn-relu in the configured order.
pub fn decoder_block<T: Real>(
    f: &mut Forward<'_, T>,
    x: Var,
    skip: Var,
    prefix: &str,
    wiring: DecoderWiring,
) -> Result<Var> {
    let up = f.g.nearest_upsample(x, 2)?;
    let (us, ss) = (f.g.shape(up).to_vec(), f.g.shape(skip).to_vec());
    if us.len() != 4 || ss.len() != 4 || us[2..] != ss[2..] {
        return Err(Error::Shape(format!(
            "decoder `{prefix}`: upsampled input {us:?} does not align with skip {ss:?}"
        )));
    }
    let fused = f.g.concat_channels(up, skip)?;
    let attention = format!("{prefix}.attention");
    let h = match wiring {
        DecoderWiring::AttentionFirst => scse(f, fused, &attention)?,
        DecoderWiring::AttentionLast => fused,
    };
    let h = f.conv(h, &format!("{prefix}.conv"), 1, 1)?;
    let h = f.bn(h, &format!("{prefix}.bn"))?;
    let h = f.g.relu(h);
    match wiring {
        DecoderWiring::AttentionFirst => Ok(h),
        DecoderWiring::AttentionLast => scse(f, h, &attention),
    }
}

/// conv3x3, bn, relu, scSE, conv3x3 to class logits.
pub fn segmentation_head<T: Real>(f: &mut Forward<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = f.conv(x, &format!("{prefix}.conv1"), 1, 1)?;
    let h = f.bn(h, &format!("{prefix}.bn"))?;
    let h = f.g.relu(h);
    let h = scse(f, h, &format!("{prefix}.attention"))?;
    f.conv(h, &format!("{prefix}.conv2"), 1, 1)
}
