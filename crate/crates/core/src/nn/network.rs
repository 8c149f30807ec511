use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::*;
use super::{BlockKind, Forward, NetworkConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{softmax_channels, BnMode, Graph, Real, Tensor, Var};

pub fn init_encoder<T: Real, R: rand::Rng>(store: &mut ParameterStore<T>, config: &NetworkConfig, rng: &mut R) {
    let b = config.base_width;
    init_conv(store, "encoder.stem.conv", b, config.in_channels, 7, false, rng);
    init_bn(store, "encoder.stem.bn", b);
    let mut cin = b;
    for (s, (&depth, &cout)) in config.stage_depths.iter().zip(&config.stage_channels()).enumerate() {
        for i in 0..depth {
            let prefix = format!("encoder.stage{}.block{i}", s + 1);
            let stride = if i == 0 && s > 0 { 2 } else { 1 };
            match config.block_kind {
                BlockKind::Residual => init_residual_block(store, &prefix, cin, cout, stride, rng),
                BlockKind::Bottleneck => init_bottleneck_block(store, &prefix, cin, cout / 4, stride, rng),
            }
            cin = cout;
        }
    }
}

/// Five feature maps at 1/2 .. 1/32 of the input resolution: stem, then the
/// four stages (the first behind a 3x3 stride-2 max pool).
pub fn encoder_forward<T: Real>(f: &mut Forward<'_, T>, image: Var, config: &NetworkConfig) -> Result<[Var; 5]> {
    let shape = f.g.shape(image).to_vec();
    let [_, c, h, w] = shape[..] else {
        return Err(Error::Shape(format!("network input must be NCHW, got {shape:?}")));
    };
    if c != config.in_channels {
        return Err(Error::Shape(format!("network expects {} channels, got {c}", config.in_channels)));
    }
    config.check_input(h, w)?;
    let x = f.conv(image, "encoder.stem.conv", 2, 3)?;
    let x = f.bn(x, "encoder.stem.bn")?;
    let stem = f.g.relu(x);
    let mut x = f.g.maxpool2d(stem, 3, 2, 1)?;
    let mut feats = [stem; 5];
    for (s, &depth) in config.stage_depths.iter().enumerate() {
        for i in 0..depth {
            let prefix = format!("encoder.stage{}.block{i}", s + 1);
            let stride = if i == 0 && s > 0 { 2 } else { 1 };
            x = match config.block_kind {
                BlockKind::Residual => residual_block(f, x, &prefix, stride)?,
                BlockKind::Bottleneck => bottleneck_block(f, x, &prefix, stride)?,
            };
        }
        feats[s + 1] = x;
    }
    Ok(feats)
}

/// Encoder, four decoder blocks consuming the skips deepest first, a final
/// 2x upsample and the segmentation head. Returns logits.
pub fn network_forward<T: Real>(f: &mut Forward<'_, T>, image: Var, config: &NetworkConfig) -> Result<Var> {
    let feats = encoder_forward(f, image, config)?;
    let mut x = feats[4];
    for j in 0..4 {
        x = decoder_block(f, x, feats[3 - j], &format!("decoder.block{j}"), config.decoder_wiring)?;
    }
    let x = f.g.nearest_upsample(x, 2)?;
    segmentation_head(f, x, "head")
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub params: ParameterStore<T>,
}

impl<T: Real> Network<T> {
    /// Fresh parameters drawn from a seeded stream.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        init_encoder(&mut params, &config, &mut rng);
        let r = config.se_reduction;
        for (j, (cin, cskip, cout)) in config.decoder_channels().into_iter().enumerate() {
            init_decoder_block(
                &mut params,
                &format!("decoder.block{j}"),
                cin,
                cskip,
                cout,
                r,
                config.decoder_wiring,
                &mut rng,
            )?;
        }
        let last = config.decoder_channels()[3].2;
        init_segmentation_head(&mut params, "head", last, config.num_classes, r, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Logits in inference mode (running batch-norm statistics, no gradients).
    pub fn predict_logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut f = Forward::new(&mut g, &self.params, BnMode::Eval, false);
        let y = network_forward(&mut f, x, &self.config)?;
        drop(f);
        Ok(g.value(y).clone())
    }

    /// Per-pixel class probabilities in inference mode.
    pub fn predict_probs(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        softmax_channels(&self.predict_logits(input)?)
    }
}
