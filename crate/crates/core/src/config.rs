//! Model hyperparameters and the named presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PosEncoding;

pub const FEATURE_DIM: usize = 80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CntfConfig {
    /// Base channel count `c`; the stages run at `c`, `2c`, `3c`.
    pub channels: usize,
    /// Blocks per stage.
    pub depths: [usize; 3],
    /// Pointwise expansion ratio inside a block.
    pub expansion: usize,
    pub block_kernel: (usize, usize),
    /// Kernels of the stem and the two inter-stage downsamplers.
    pub down_kernels: [(usize, usize); 3],
    pub down_strides: [(usize, usize); 3],
    pub layer_scale_init: f64,
    pub drop_path: f64,
}

impl CntfConfig {
    pub fn new(channels: usize, depths: [usize; 3]) -> Self {
        Self {
            channels,
            depths,
            expansion: 4,
            block_kernel: (7, 7),
            down_kernels: [(2, 2), (2, 2), (1, 2)],
            down_strides: [(2, 2), (2, 2), (1, 2)],
            layer_scale_init: 1e-6,
            drop_path: 0.1,
        }
    }

    pub fn stage_channels(&self) -> [usize; 3] {
        let c = self.channels;
        [c, 2 * c, 3 * c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontendConfig {
    Cntf(CntfConfig),
    /// Two stride-2 convolutions with ReLU, then a flattening projection.
    ConformerSubsampling {
        channels: usize,
        kernel: usize,
    },
    /// Eight convolutions at a constant width with strides 2,1,1,1,2,1,1,1
    /// and a residual from the second block's output to the fourth's.
    Cnn8 {
        channels: usize,
        kernel: usize,
    },
}

impl FrontendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Cntf(_) => "cntf",
            Self::ConformerSubsampling { .. } => "conformer_subsampling",
            Self::Cnn8 { .. } => "cnn8",
        }
    }
}

/// Normalization inside the convolution module of a Conformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConvNorm {
    #[default]
    LayerNorm,
    /// Batch norm at inference, i.e. a per-channel affine map with
    /// statistics folded into the scale and shift.
    BatchNorm,
}

/// Attention chunking, in post-frontend (40 ms) frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChunkSpec {
    #[default]
    Full,
    Fixed {
        size: usize,
    },
    /// Per call: with probability `full_prob` full attention, otherwise an
    /// even size drawn uniformly from `2, 4, ..., max`.
    Dynamic {
        full_prob: f64,
        max: usize,
    },
}

impl ChunkSpec {
    pub const DYNAMIC: ChunkSpec = ChunkSpec::Dynamic {
        full_prob: 0.5,
        max: 50,
    };

    pub fn validate(&self) -> Result<()> {
        match *self {
            ChunkSpec::Full => Ok(()),
            ChunkSpec::Fixed { size } => check_chunk(size),
            ChunkSpec::Dynamic { full_prob, max } => {
                if !(0.0..=1.0).contains(&full_prob) || max < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "dynamic chunk needs full_prob in [0,1] and max >= 2, got {full_prob}, {max}"
                    )));
                }
                Ok(())
            }
        }
    }
}

pub fn check_chunk(size: usize) -> Result<()> {
    if size < 2 || !size.is_multiple_of(2) {
        return Err(Error::OddChunk(size));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub conv_kernel: usize,
    /// Insert the stride-2 memory module after this many blocks.
    pub downsample_after: Option<usize>,
    pub causal: bool,
    pub chunk: ChunkSpec,
    pub pos_encoding: PosEncoding,
    pub conv_norm: ConvNorm,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub feat_dim: usize,
    pub frontend: FrontendConfig,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "model dim {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument(
                "encoder needs at least one layer".into(),
            ));
        }
        if let Some(k) = self.downsample_after {
            if k == 0 || k >= self.layers {
                return Err(Error::InvalidArgument(format!(
                    "downsample position {k} outside [1, {}]",
                    self.layers - 1
                )));
            }
        }
        if self.conv_kernel == 0 {
            return Err(Error::InvalidArgument(
                "conv kernel must be positive".into(),
            ));
        }
        self.chunk.validate()
    }

    /// Total time subsampling of the encoder.
    pub fn time_reduction(&self) -> usize {
        if self.downsample_after.is_some() {
            8
        } else {
            4
        }
    }

    /// Encoder output length for `t` input frames.
    pub fn output_frames(&self, t: usize) -> usize {
        let m = t.div_ceil(4);
        if self.downsample_after.is_some() {
            m / 2
        } else {
            m
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub label_smoothing: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ConformerS,
    ConformerL,
    NextformerS,
    NextformerL,
    NextformerXs,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::ConformerS,
        Preset::ConformerL,
        Preset::NextformerS,
        Preset::NextformerL,
        Preset::NextformerXs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ConformerS => "conformer_s",
            Preset::ConformerL => "conformer_l",
            Preset::NextformerS => "nextformer_s",
            Preset::NextformerL => "nextformer_l",
            Preset::NextformerXs => "nextformer_xs",
        }
    }

    pub fn config(self) -> ModelConfig {
        ModelConfig::preset(self)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// CTC output classes including blank (id 0). The decoder adds one more
    /// class, id `vocab`, shared by start and end of sentence.
    pub vocab: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// CTC weight of the joint objective.
    pub ctc_weight: f64,
}

/// Vocabulary sizes of the two reference corpora (character units plus
/// blank and unknown).
pub const VOCAB_SMALL: usize = 4232;
pub const VOCAB_LARGE: usize = 5537;

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (vocab, d, heads, ffn, enc_layers, dec_layers) = match p {
            Preset::ConformerS | Preset::NextformerS => (VOCAB_SMALL, 256, 4, 2048, 12, 6),
            Preset::ConformerL | Preset::NextformerL => (VOCAB_LARGE, 512, 8, 2048, 12, 6),
            Preset::NextformerXs => (8, 16, 2, 64, 2, 2),
        };
        let (frontend, downsample_after) = match p {
            Preset::ConformerS | Preset::ConformerL => (
                FrontendConfig::ConformerSubsampling {
                    channels: d,
                    kernel: 3,
                },
                None,
            ),
            Preset::NextformerS => (
                FrontendConfig::Cntf(CntfConfig::new(56, [3, 3, 3])),
                Some(6),
            ),
            Preset::NextformerL => (
                FrontendConfig::Cntf(CntfConfig::new(104, [3, 3, 3])),
                Some(6),
            ),
            Preset::NextformerXs => (FrontendConfig::Cntf(CntfConfig::new(8, [1, 1, 1])), Some(1)),
        };
        ModelConfig {
            name: p.name().to_string(),
            vocab,
            encoder: EncoderConfig {
                d,
                heads,
                ffn_dim: ffn,
                layers: enc_layers,
                conv_kernel: 15,
                downsample_after,
                causal: false,
                chunk: ChunkSpec::Full,
                pos_encoding: PosEncoding::Relative,
                conv_norm: ConvNorm::LayerNorm,
                dropout: 0.1,
                attn_dropout: 0.1,
                feat_dim: FEATURE_DIM,
                frontend,
            },
            decoder: DecoderConfig {
                layers: dec_layers,
                d,
                heads,
                ffn_dim: ffn,
                dropout: 0.1,
                attn_dropout: 0.1,
                label_smoothing: 0.1,
            },
            ctc_weight: 0.3,
        }
    }

    /// Streaming variant: causal convolutions and a fixed chunk.
    pub fn streaming(mut self, chunk: usize) -> Result<Self> {
        check_chunk(chunk)?;
        self.encoder.causal = true;
        self.encoder.chunk = ChunkSpec::Fixed { size: chunk };
        Ok(self)
    }

    pub fn causal(mut self) -> Self {
        self.encoder.causal = true;
        self
    }

    pub fn with_frontend(mut self, frontend: FrontendConfig) -> Self {
        self.encoder.frontend = frontend;
        self
    }

    /// The eight-layer CNN frontend at width 256 with 3×3 kernels.
    pub fn with_cnn8(self) -> Self {
        self.with_frontend(FrontendConfig::Cnn8 {
            channels: 256,
            kernel: 3,
        })
    }

    pub fn with_downsample_after(mut self, layer: Option<usize>) -> Self {
        self.encoder.downsample_after = layer;
        self
    }

    /// Turn off every stochastic regularizer.
    pub fn without_regularization(mut self) -> Self {
        self.encoder.dropout = 0.0;
        self.encoder.attn_dropout = 0.0;
        if let FrontendConfig::Cntf(c) = &mut self.encoder.frontend {
            c.drop_path = 0.0;
        }
        self.decoder.dropout = 0.0;
        self.decoder.attn_dropout = 0.0;
        self
    }

    pub fn decoder_classes(&self) -> usize {
        self.vocab + 1
    }

    pub fn sos_eos(&self) -> usize {
        self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::InvalidArgument(
                "vocab must include blank and one label".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::InvalidArgument(format!(
                "ctc weight {} outside [0, 1]",
                self.ctc_weight
            )));
        }
        if !self.decoder.d.is_multiple_of(self.decoder.heads.max(1)) || self.decoder.heads == 0 {
            return Err(Error::InvalidArgument(
                "decoder dim not divisible by heads".into(),
            ));
        }
        self.encoder.validate()
    }
}
