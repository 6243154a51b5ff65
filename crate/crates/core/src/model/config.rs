use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ScoreMode;

pub const CBN_BLOCKS: usize = 5;
pub const DISTRIBUTION_BUCKETS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneScale {
    /// VGG19 convolutional stack on 224×224 inputs.
    Full,
    /// Five-block reduced stack on 32×32 inputs.
    Tiny,
}

impl BackboneScale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::Config(format!("unknown scale {s:?} (expected tiny or full)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Tiny => "tiny",
        }
    }

    pub fn input_size(self) -> usize {
        match self {
            Self::Full => 224,
            Self::Tiny => 32,
        }
    }

    pub fn blocks(self) -> Vec<BlockSpec> {
        let b = |c: usize, n: usize, pool: bool| BlockSpec {
            channels: vec![c; n],
            pool,
        };
        match self {
            Self::Full => vec![b(64, 2, true), b(128, 2, true), b(256, 4, true), b(512, 4, true), b(512, 4, true)],
            Self::Tiny => vec![b(8, 1, true), b(16, 1, true), b(32, 1, true), b(64, 1, false), b(64, 1, false)],
        }
    }

    /// Channels, height and width of the final feature map.
    pub fn feature_shape(self) -> (usize, usize, usize) {
        let blocks = self.blocks();
        let pools = blocks.iter().filter(|b| b.pool).count();
        let side = self.input_size() >> pools;
        (*blocks.last().unwrap().channels.last().unwrap(), side, side)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    /// Output channels of each 3×3 convolution.
    pub channels: Vec<usize>,
    pub pool: bool,
}

/// Which normalization layers in a masked block become conditional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CbnGranularity {
    #[default]
    FirstConv,
    WholeBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub use_aux: bool,
    pub use_cbn: bool,
    pub use_attention: bool,
    pub use_high_fusion: bool,
    pub cbn_block_mask: [bool; CBN_BLOCKS],
    pub cbn_granularity: CbnGranularity,
    pub cbn_hidden: usize,
    pub att_hidden: usize,
    pub high_hidden: usize,
    pub head_hidden: usize,
    pub output_mode: ScoreMode,
    pub backbone_scale: BackboneScale,
    pub dim_aux: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// Full-scale settings for ad images with a regression head.
    pub fn real_ad(dim_aux: usize) -> Self {
        Self {
            use_aux: true,
            use_cbn: true,
            use_attention: true,
            use_high_fusion: true,
            cbn_block_mask: [true, false, false, false, false],
            cbn_granularity: CbnGranularity::FirstConv,
            cbn_hidden: 256,
            att_hidden: 512,
            high_hidden: 512,
            head_hidden: 4096,
            output_mode: ScoreMode::Regression,
            backbone_scale: BackboneScale::Full,
            dim_aux,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Full-scale settings for the photo-aesthetics benchmark with a distribution head.
    pub fn ava(dim_aux: usize) -> Self {
        Self {
            cbn_hidden: 64,
            output_mode: ScoreMode::Distribution,
            ..Self::real_ad(dim_aux)
        }
    }

    /// Reduced network for 32×32 inputs.
    pub fn tiny(dim_aux: usize) -> Self {
        Self {
            cbn_hidden: 64,
            att_hidden: 64,
            high_hidden: 64,
            head_hidden: 128,
            backbone_scale: BackboneScale::Tiny,
            ..Self::real_ad(dim_aux)
        }
    }

    pub fn for_scale(scale: BackboneScale, dim_aux: usize) -> Self {
        match scale {
            BackboneScale::Full => Self::real_ad(dim_aux),
            BackboneScale::Tiny => Self::tiny(dim_aux),
        }
    }

    /// Switches the four modules. Disabling CBN clears the block mask; enabling it on an
    /// empty mask selects the first block.
    pub fn with_modules(mut self, aux: bool, cbn: bool, attention: bool, high_fusion: bool) -> Self {
        self.use_aux = aux;
        self.use_cbn = cbn;
        self.use_attention = attention;
        self.use_high_fusion = high_fusion;
        if !cbn {
            self.cbn_block_mask = [false; CBN_BLOCKS];
        } else if !self.cbn_block_mask.iter().any(|&b| b) {
            self.cbn_block_mask[0] = true;
        }
        self
    }

    pub fn with_mask(mut self, mask: [bool; CBN_BLOCKS]) -> Self {
        self.use_cbn = mask.iter().any(|&b| b);
        self.cbn_block_mask = mask;
        self
    }

    pub fn image_only(self) -> Self {
        self.with_modules(false, false, false, false)
    }

    pub fn output_dim(&self) -> usize {
        match self.output_mode {
            ScoreMode::Regression => 1,
            ScoreMode::Distribution => DISTRIBUTION_BUCKETS,
        }
    }

    /// Compact `O`/`×` label for the four module switches.
    pub fn module_label(&self) -> String {
        [self.use_aux, self.use_cbn, self.use_attention, self.use_high_fusion]
            .iter()
            .map(|&b| if b { 'O' } else { '×' })
            .collect()
    }

    pub fn mask_label(&self) -> String {
        let bits: Vec<&str> = self.cbn_block_mask.iter().map(|&b| if b { "1" } else { "0" }).collect();
        format!("{{{}}}", bits.join(","))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let any_mask = self.cbn_block_mask.iter().any(|&b| b);
        if !self.use_cbn && any_mask {
            return bad("cbn_block_mask must be all zero when CBN is disabled");
        }
        if self.use_cbn && !any_mask {
            return bad("CBN is enabled but cbn_block_mask selects no block");
        }
        if (self.use_cbn || self.use_attention || self.use_high_fusion) && !self.use_aux {
            return bad("CBN, attention and high-level fusion all need the auxiliary vector");
        }
        if self.use_aux && self.dim_aux == 0 {
            return bad("dim_aux must be positive when the auxiliary vector is used");
        }
        if [self.cbn_hidden, self.att_hidden, self.high_hidden, self.head_hidden].contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_epsilon must be positive and bn_momentum in [0, 1]");
        }
        Ok(())
    }
}
