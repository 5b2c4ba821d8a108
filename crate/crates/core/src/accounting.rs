//! Closed-form parameter and FLOPs counts.
//!
//! FLOPs count one multiply-accumulate as one operation, over the encoder
//! (frontend, Conformer layers, downsampler) only, ignoring biases, norms
//! and activations.

use serde::Serialize;

use crate::config::{CntfConfig, EncoderConfig, FrontendConfig, ModelConfig};
use crate::decoder::Decoder;
use crate::encoder::{ConformerBlock, DownsampleModule};
use crate::frontend::{Cntf, ConvNextBlock, CNN8_STRIDES};
use crate::nn::{Conv2d, Linear, PosEncoding};
use crate::ops::ConvSpec;

pub const FLOPS_CONVENTION: &str =
    "1 MAC = 1 FLOP; encoder only; conv, linear and attention products; biases, norms and activations excluded";

pub const FLOPS_FRAMES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: u64,
    pub breakdown: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub input_frames: usize,
    pub total: u64,
    pub breakdown: Vec<(String, u64)>,
    /// Pointwise MACs of each CNTF stage; empty for other frontends.
    pub stage_pointwise: Vec<u64>,
    pub convention: &'static str,
}

fn report(breakdown: Vec<(String, u64)>) -> (u64, Vec<(String, u64)>) {
    (breakdown.iter().map(|(_, v)| v).sum(), breakdown)
}

fn frontend_params(cfg: &EncoderConfig) -> u64 {
    let (f, d) = (cfg.feat_dim, cfg.d);
    let n = match &cfg.frontend {
        FrontendConfig::Cntf(c) => {
            let ch = c.stage_channels();
            let mut n = Conv2d::param_count(
                &ConvSpec::new(c.down_kernels[0], c.down_strides[0], (1, ch[0])),
                true,
            ) + 2 * ch[0];
            for i in 0..3 {
                if i > 0 {
                    n += 2 * ch[i - 1]
                        + Conv2d::param_count(
                            &ConvSpec::new(
                                c.down_kernels[i],
                                c.down_strides[i],
                                (ch[i - 1], ch[i]),
                            ),
                            true,
                        );
                }
                n += c.depths[i] * ConvNextBlock::param_count(ch[i], c);
            }
            n + Linear::param_count(ch[2] * Cntf::freq_out(c, f), d, true)
        }
        FrontendConfig::ConformerSubsampling { channels, kernel } => {
            let k = (*kernel, *kernel);
            Conv2d::param_count(&ConvSpec::new(k, (2, 2), (1, *channels)), true)
                + Conv2d::param_count(&ConvSpec::new(k, (2, 2), (*channels, *channels)), true)
                + Linear::param_count(channels * f.div_ceil(4), d, true)
        }
        FrontendConfig::Cnn8 { channels, kernel } => {
            let mut cin = 1;
            let mut n = 0;
            for s in CNN8_STRIDES {
                n += Conv2d::param_count(
                    &ConvSpec::new((*kernel, *kernel), (s, s), (cin, *channels)),
                    true,
                );
                cin = *channels;
            }
            n + Linear::param_count(channels * f.div_ceil(4), d, true)
        }
    };
    n as u64
}

pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let e = &cfg.encoder;
    let mut b = vec![("frontend".to_string(), frontend_params(e))];
    for i in 0..e.layers {
        if e.downsample_after == Some(i) {
            b.push((
                "downsample".into(),
                DownsampleModule::param_count(e.d) as u64,
            ));
        }
        b.push((
            format!("encoder.layer{i}"),
            ConformerBlock::param_count(e) as u64,
        ));
    }
    b.push(("encoder.after_norm".into(), 2 * e.d as u64));
    b.push((
        "ctc".into(),
        Linear::param_count(e.d, cfg.vocab, true) as u64,
    ));
    b.push((
        "decoder".into(),
        Decoder::param_count(&cfg.decoder, cfg.decoder_classes()) as u64,
    ));
    let (total, breakdown) = report(b);
    ParamReport { total, breakdown }
}

fn conv_macs(spec: &ConvSpec, t: usize, f: usize) -> (u64, usize, usize) {
    let (to, fo) = (t.div_ceil(spec.stride.0), f.div_ceil(spec.stride.1));
    let per = spec.kernel.0 * spec.kernel.1 * if spec.depthwise { 1 } else { spec.channels.0 };
    ((per * spec.channels.1 * to * fo) as u64, to, fo)
}

/// MACs of one Conformer layer over `t` frames.
pub fn conformer_layer_flops(cfg: &EncoderConfig, t: usize) -> u64 {
    let (t, d, ffn) = (t as u64, cfg.d as u64, cfg.ffn_dim as u64);
    let ffns = 2 * 2 * t * d * ffn;
    let mut attn = 4 * t * d * d + 2 * t * t * d;
    if cfg.pos_encoding == PosEncoding::Relative {
        attn += (2 * t - 1) * d * d + t * (2 * t - 1) * d;
    }
    let conv = 3 * t * d * d + cfg.conv_kernel as u64 * t * d;
    ffns + attn + conv
}

fn cntf_flops(c: &CntfConfig, d: usize, t: usize, f: usize) -> (u64, Vec<u64>) {
    let ch = c.stage_channels();
    let (mut macs, mut t, mut f) = conv_macs(
        &ConvSpec::new(c.down_kernels[0], c.down_strides[0], (1, ch[0])),
        t,
        f,
    );
    let mut stages = Vec::new();
    for i in 0..3 {
        if i > 0 {
            let (m, to, fo) = conv_macs(
                &ConvSpec::new(c.down_kernels[i], c.down_strides[i], (ch[i - 1], ch[i])),
                t,
                f,
            );
            macs += m;
            (t, f) = (to, fo);
        }
        let e = c.expansion * ch[i];
        let pw = (2 * ch[i] * e * t * f) as u64;
        let dw = conv_macs(&ConvSpec::depthwise(c.block_kernel, ch[i]), t, f).0;
        macs += c.depths[i] as u64 * (pw + dw);
        stages.push(c.depths[i] as u64 * pw);
    }
    (macs + (ch[2] * f * d * t) as u64, stages)
}

pub fn count_flops(cfg: &ModelConfig, input_frames: usize) -> FlopsReport {
    let e = &cfg.encoder;
    let (t, f) = (input_frames, e.feat_dim);
    let (front, stage_pointwise) = match &e.frontend {
        FrontendConfig::Cntf(c) => cntf_flops(c, e.d, t, f),
        FrontendConfig::ConformerSubsampling { channels, kernel } => {
            let k = (*kernel, *kernel);
            let (m1, t1, f1) = conv_macs(&ConvSpec::new(k, (2, 2), (1, *channels)), t, f);
            let (m2, t2, f2) = conv_macs(&ConvSpec::new(k, (2, 2), (*channels, *channels)), t1, f1);
            (m1 + m2 + (channels * f2 * e.d * t2) as u64, Vec::new())
        }
        FrontendConfig::Cnn8 { channels, kernel } => {
            let (mut macs, mut tt, mut ff, mut cin) = (0, t, f, 1);
            for s in CNN8_STRIDES {
                let (m, to, fo) = conv_macs(
                    &ConvSpec::new((*kernel, *kernel), (s, s), (cin, *channels)),
                    tt,
                    ff,
                );
                (macs, tt, ff, cin) = (macs + m, to, fo, *channels);
            }
            (macs + (channels * ff * e.d * tt) as u64, Vec::new())
        }
    };
    let mut b = vec![("frontend".to_string(), front)];
    let mut frames = t.div_ceil(4);
    for i in 0..e.layers {
        if e.downsample_after == Some(i) {
            frames /= 2;
            b.push(("downsample".into(), (2 * frames * e.d) as u64));
        }
        b.push((
            format!("encoder.layer{i}"),
            conformer_layer_flops(e, frames),
        ));
    }
    let (total, breakdown) = report(b);
    FlopsReport {
        input_frames,
        total,
        breakdown,
        stage_pointwise,
        convention: FLOPS_CONVENTION,
    }
}
