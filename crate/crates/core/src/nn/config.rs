use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockKind {
    /// Two 3x3 convolutions (ResNet-18/34 basic block).
    #[default]
    Residual,
    /// 1x1 reduce, 3x3, 1x1 expand by 4.
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Residual => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(BlockKind::Residual),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::Config(format!("unknown block kind `{other}`"))),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Residual => "residual",
            BlockKind::Bottleneck => "bottleneck",
        })
    }
}

/// Where the attention block sits inside a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderWiring {
    /// upsample, concat skip, scSE, conv3x3, bn, relu
    #[default]
    AttentionFirst,
    /// upsample, concat skip, conv3x3, bn, relu, scSE
    AttentionLast,
}

impl FromStr for DecoderWiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_first" => Ok(DecoderWiring::AttentionFirst),
            "attention_last" => Ok(DecoderWiring::AttentionLast),
            other => Err(Error::Config(format!("unknown decoder wiring `{other}`"))),
        }
    }
}

impl fmt::Display for DecoderWiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderWiring::AttentionFirst => "attention_first",
            DecoderWiring::AttentionLast => "attention_last",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Blocks per encoder stage; always four stages.
    pub stage_depths: Vec<usize>,
    /// Channels of the stem and first stage.
    pub base_width: usize,
    pub block_kind: BlockKind,
    /// Channel reduction inside the cSE branch.
    pub se_reduction: usize,
    pub height: usize,
    pub width: usize,
    pub decoder_wiring: DecoderWiring,
}

/// Total downsampling factor of the encoder.
pub const INPUT_MULTIPLE: usize = 32;

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl NetworkConfig {
    /// ResNet-34 layout at full width.
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            num_classes: 2,
            stage_depths: vec![3, 4, 6, 3],
            base_width: 64,
            block_kind: BlockKind::Residual,
            se_reduction: 2,
            height: 960,
            width: 1280,
            decoder_wiring: DecoderWiring::AttentionFirst,
        }
    }

    /// Narrow, shallow preset that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self { stage_depths: vec![2, 2, 2, 2], base_width: 16, height: 128, width: 128, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be 2 or 3, got {}", self.num_classes)));
        }
        if self.stage_depths.len() != 4 || self.stage_depths.contains(&0) {
            return Err(Error::Config(format!(
                "encoder needs four stages of at least one block, got {:?}",
                self.stage_depths
            )));
        }
        if self.se_reduction == 0 || self.base_width == 0 || !self.base_width.is_multiple_of(self.se_reduction) {
            return Err(Error::Config(format!(
                "base_width {} must be a positive multiple of se_reduction {}",
                self.base_width, self.se_reduction
            )));
        }
        self.check_input(self.height, self.width)
    }

    /// Spatial extents must survive five halvings exactly.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || !height.is_multiple_of(INPUT_MULTIPLE) || !width.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Config(format!("input {height}x{width} is not divisible by {INPUT_MULTIPLE}")));
        }
        Ok(())
    }

    /// Output channels of the four encoder stages.
    pub fn stage_channels(&self) -> [usize; 4] {
        let e = self.block_kind.expansion();
        [1, 2, 4, 8].map(|m| self.base_width * m * e)
    }

    /// Channels of the five encoder feature maps, shallowest first.
    pub fn feature_channels(&self) -> [usize; 5] {
        let s = self.stage_channels();
        [self.base_width, s[0], s[1], s[2], s[3]]
    }

    /// `(input channels, skip channels, output channels)` of the four decoder
    /// blocks, deepest first. Each block emits the width of its skip.
    pub fn decoder_channels(&self) -> [(usize, usize, usize); 4] {
        let f = self.feature_channels();
        let mut out = [(0, 0, 0); 4];
        let mut x = f[4];
        for (j, slot) in out.iter_mut().enumerate() {
            let skip = f[3 - j];
            *slot = (x, skip, skip);
            x = skip;
        }
        out
    }
}
