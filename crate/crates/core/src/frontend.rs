//! Acoustic frontends mapping `[T × 80]` features to `[ceil(T/4) × d]`.
//!
//! * [`Cntf`]: three stages of ConvNeXt blocks at `c`, `2c`, `3c` channels,
//!   time stride 2 at the stem and the first downsampler, frequency stride 2
//!   at all three.
//! * [`ConvSubsampling`]: two 3×3 stride-2 convolutions with ReLU.
//! * [`Cnn8`]: eight 3×3 convolutions, strides 2,1,1,1,2,1,1,1.
//!
//! Layouts are `[C × T × F]` for convolutions and channels-last for the
//! pointwise parts of a block.

use crate::autograd::Var;
use crate::config::{CntfConfig, FrontendConfig};
use crate::error::{Error, Result};
use crate::nn::{residual_branch, Builder, Conv2d, Init, LayerNorm, Linear, ParamId, Pass};
use crate::ops::{ConvSpec, LAYER_NORM_EPS};
use crate::stream::RunCtx;

/// Minimum input length of every frontend.
pub const MIN_FRAMES: usize = 4;

/// LayerNorm over the channel axis of a `[C × T × F]` tensor.
fn channel_norm(p: &Pass, ln: &LayerNorm, x: &Var) -> Result<Var> {
    x.permute(&[1, 2, 0])?
        .layer_norm(p.var(ln.gamma), p.var(ln.beta), LAYER_NORM_EPS)?
        .permute(&[2, 0, 1])
}

/// `[C × T × F]` → `[T × C·F]`, channel-major within a frame.
fn flatten_frames(x: &Var) -> Result<Var> {
    let [c, t, f] = *x.shape() else {
        return Err(Error::invalid_shape(
            "flatten",
            x.shape(),
            "expected [C, T, F]",
        ));
    };
    x.permute(&[1, 0, 2])?.reshape(&[t, c * f])
}

fn check_input(x: &Var, feat_dim: usize) -> Result<usize> {
    match *x.shape() {
        [t, f] if f == feat_dim => {
            if t < MIN_FRAMES {
                Err(Error::TooShort {
                    frames: t,
                    min: MIN_FRAMES,
                })
            } else {
                Ok(t)
            }
        }
        _ => Err(Error::shape("frontend", x.shape(), &[0, feat_dim])),
    }
}

#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub dw: Conv2d,
    pub norm: LayerNorm,
    pub pw1: Linear,
    pub pw2: Linear,
    pub gamma: ParamId,
    pub drop_path: f64,
    pub channels: usize,
}

impl ConvNextBlock {
    pub fn new(b: &mut Builder, name: &str, c: usize, cfg: &CntfConfig) -> Self {
        let mut s = b.scope(name);
        Self {
            dw: Conv2d::new(&mut s, "dw", ConvSpec::depthwise(cfg.block_kernel, c), true),
            norm: LayerNorm::new(&mut s, "norm", c),
            pw1: Linear::new(&mut s, "pw1", c, cfg.expansion * c, true),
            pw2: Linear::new(&mut s, "pw2", cfg.expansion * c, c, true),
            gamma: s.param("layer_scale", &[c], Init::Const(cfg.layer_scale_init)),
            drop_path: cfg.drop_path,
            channels: c,
        }
    }

    pub fn param_count(c: usize, cfg: &CntfConfig) -> usize {
        let e = cfg.expansion * c;
        Conv2d::param_count(&ConvSpec::depthwise(cfg.block_kernel, c), true)
            + 2 * c
            + Linear::param_count(c, e, true)
            + Linear::param_count(e, c, true)
            + c
    }

    /// `[c × T × F]` → same shape.
    pub fn forward(&self, p: &mut Pass, x: &Var) -> Result<Var> {
        self.forward_ctx(p, x, &mut RunCtx::full(false, None))
    }

    pub(crate) fn forward_ctx(&self, p: &mut Pass, x: &Var, ctx: &mut RunCtx) -> Result<Var> {
        if x.shape().first() != Some(&self.channels) {
            return Err(Error::shape("convnext block", x.shape(), &[self.channels]));
        }
        let h = ctx.conv(p, &self.dw, x)?.permute(&[1, 2, 0])?;
        let h = self.norm.forward(p, &h)?;
        let h = self.pw1.forward(p, &h)?.gelu()?;
        let h = self.pw2.forward(p, &h)?.mul(p.var(self.gamma))?;
        let h = h.permute(&[2, 0, 1])?;
        residual_branch(p, x, &h, None, self.drop_path)
    }
}

#[derive(Clone, Debug)]
pub struct Cntf {
    pub cfg: CntfConfig,
    pub stem: Conv2d,
    pub stem_norm: LayerNorm,
    pub stages: [Vec<ConvNextBlock>; 3],
    pub down_norms: [LayerNorm; 2],
    pub downs: [Conv2d; 2],
    pub proj: Linear,
    pub feat_dim: usize,
}

impl Cntf {
    pub fn new(b: &mut Builder, cfg: &CntfConfig, feat_dim: usize, d: usize) -> Self {
        let ch = cfg.stage_channels();
        let mut s = b.scope("cntf");
        let stem = Conv2d::new(
            &mut s,
            "stem",
            ConvSpec::new(cfg.down_kernels[0], cfg.down_strides[0], (1, ch[0])),
            true,
        );
        let stem_norm = LayerNorm::new(&mut s, "stem_norm", ch[0]);
        let mut stages: [Vec<ConvNextBlock>; 3] = Default::default();
        let mut down_norms = Vec::new();
        let mut downs = Vec::new();
        for (i, stage) in stages.iter_mut().enumerate() {
            if i > 0 {
                down_norms.push(LayerNorm::new(&mut s, &format!("down{i}_norm"), ch[i - 1]));
                downs.push(Conv2d::new(
                    &mut s,
                    &format!("down{i}"),
                    ConvSpec::new(cfg.down_kernels[i], cfg.down_strides[i], (ch[i - 1], ch[i])),
                    true,
                ));
            }
            for j in 0..cfg.depths[i] {
                stage.push(ConvNextBlock::new(
                    &mut s,
                    &format!("stage{i}.{j}"),
                    ch[i],
                    cfg,
                ));
            }
        }
        let fo = Self::freq_out(cfg, feat_dim);
        let proj = Linear::new(&mut s, "proj", ch[2] * fo, d, true);
        Self {
            cfg: cfg.clone(),
            stem,
            stem_norm,
            stages,
            down_norms: [down_norms.remove(0), down_norms.remove(0)],
            downs: [downs.remove(0), downs.remove(0)],
            proj,
            feat_dim,
        }
    }

    /// Frequency extents after the stem and each downsampler.
    pub fn freq_ladder(cfg: &CntfConfig, feat_dim: usize) -> [usize; 3] {
        let mut f = feat_dim;
        let mut out = [0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            f = f.div_ceil(cfg.down_strides[i].1);
            *o = f;
        }
        out
    }

    pub fn freq_out(cfg: &CntfConfig, feat_dim: usize) -> usize {
        Self::freq_ladder(cfg, feat_dim)[2]
    }

    pub(crate) fn forward_ctx(&self, p: &mut Pass, x: &Var, ctx: &mut RunCtx) -> Result<Var> {
        let [t, f] = *x.shape() else { unreachable!() };
        let mut h = ctx.conv(p, &self.stem, &x.reshape(&[1, t, f])?)?;
        h = channel_norm(p, &self.stem_norm, &h)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = channel_norm(p, &self.down_norms[i - 1], &h)?;
                h = ctx.conv(p, &self.downs[i - 1], &h)?;
            }
            for block in stage {
                h = block.forward_ctx(p, &h, ctx)?;
            }
        }
        self.proj.forward(p, &flatten_frames(&h)?)
    }

    /// Per-stage outputs `[C × T × F]`, for shape inspection.
    pub fn stage_shapes(&self, p: &mut Pass, x: &Var) -> Result<Vec<Vec<usize>>> {
        let t = check_input(x, self.feat_dim)?;
        let f = self.feat_dim;
        let mut ctx = RunCtx::full(false, None);
        let mut h = ctx.conv(p, &self.stem, &x.reshape(&[1, t, f])?)?;
        h = channel_norm(p, &self.stem_norm, &h)?;
        let mut shapes = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = channel_norm(p, &self.down_norms[i - 1], &h)?;
                h = ctx.conv(p, &self.downs[i - 1], &h)?;
            }
            for block in stage {
                h = block.forward_ctx(p, &h, &mut ctx)?;
            }
            shapes.push(h.shape().to_vec());
        }
        Ok(shapes)
    }
}

#[derive(Clone, Debug)]
pub struct ConvSubsampling {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Linear,
    pub feat_dim: usize,
}

impl ConvSubsampling {
    pub fn new(b: &mut Builder, channels: usize, kernel: usize, feat_dim: usize, d: usize) -> Self {
        let mut s = b.scope("subsampling");
        let k = (kernel, kernel);
        let conv1 = Conv2d::new(
            &mut s,
            "conv1",
            ConvSpec::new(k, (2, 2), (1, channels)),
            true,
        );
        let conv2 = Conv2d::new(
            &mut s,
            "conv2",
            ConvSpec::new(k, (2, 2), (channels, channels)),
            true,
        );
        let fo = feat_dim.div_ceil(2).div_ceil(2);
        let proj = Linear::new(&mut s, "proj", channels * fo, d, true);
        Self {
            conv1,
            conv2,
            proj,
            feat_dim,
        }
    }

    pub(crate) fn forward_ctx(&self, p: &mut Pass, x: &Var, ctx: &mut RunCtx) -> Result<Var> {
        let [t, f] = *x.shape() else { unreachable!() };
        let h = ctx.conv(p, &self.conv1, &x.reshape(&[1, t, f])?)?.relu()?;
        let h = ctx.conv(p, &self.conv2, &h)?.relu()?;
        self.proj.forward(p, &flatten_frames(&h)?)
    }
}

pub const CNN8_STRIDES: [usize; 8] = [2, 1, 1, 1, 2, 1, 1, 1];

#[derive(Clone, Debug)]
pub struct Cnn8 {
    pub convs: Vec<Conv2d>,
    pub proj: Linear,
    pub feat_dim: usize,
}

impl Cnn8 {
    pub fn new(b: &mut Builder, channels: usize, kernel: usize, feat_dim: usize, d: usize) -> Self {
        let mut s = b.scope("cnn8");
        let mut cin = 1;
        let convs = CNN8_STRIDES
            .iter()
            .enumerate()
            .map(|(i, &st)| {
                let spec = ConvSpec::new((kernel, kernel), (st, st), (cin, channels));
                cin = channels;
                Conv2d::new(&mut s, &format!("conv{}", i + 1), spec, true)
            })
            .collect();
        let fo = feat_dim.div_ceil(2).div_ceil(2);
        let proj = Linear::new(&mut s, "proj", channels * fo, d, true);
        Self {
            convs,
            proj,
            feat_dim,
        }
    }

    pub(crate) fn forward_ctx(&self, p: &mut Pass, x: &Var, ctx: &mut RunCtx) -> Result<Var> {
        let [t, f] = *x.shape() else { unreachable!() };
        let mut h = x.reshape(&[1, t, f])?;
        let mut out2 = None;
        for (i, conv) in self.convs.iter().enumerate() {
            h = ctx.conv(p, conv, &h)?.relu()?;
            match i {
                1 => out2 = Some(h.clone()),
                3 => h = h.add(out2.as_ref().unwrap())?,
                _ => {}
            }
        }
        self.proj.forward(p, &flatten_frames(&h)?)
    }
}

#[derive(Clone, Debug)]
pub enum Frontend {
    Cntf(Cntf),
    Subsampling(ConvSubsampling),
    Cnn8(Cnn8),
}

impl Frontend {
    pub fn new(b: &mut Builder, cfg: &FrontendConfig, feat_dim: usize, d: usize) -> Self {
        match cfg {
            FrontendConfig::Cntf(c) => Frontend::Cntf(Cntf::new(b, c, feat_dim, d)),
            FrontendConfig::ConformerSubsampling { channels, kernel } => {
                Frontend::Subsampling(ConvSubsampling::new(b, *channels, *kernel, feat_dim, d))
            }
            FrontendConfig::Cnn8 { channels, kernel } => {
                Frontend::Cnn8(Cnn8::new(b, *channels, *kernel, feat_dim, d))
            }
        }
    }

    pub fn feat_dim(&self) -> usize {
        match self {
            Frontend::Cntf(f) => f.feat_dim,
            Frontend::Subsampling(f) => f.feat_dim,
            Frontend::Cnn8(f) => f.feat_dim,
        }
    }

    /// Full-utterance forward, `[T × F]` → `[ceil(T/4) × d]`.
    pub fn forward(&self, p: &mut Pass, x: &Var, causal: bool) -> Result<Var> {
        self.forward_ctx(p, x, &mut RunCtx::full(causal, None))
    }

    pub(crate) fn forward_ctx(&self, p: &mut Pass, x: &Var, ctx: &mut RunCtx) -> Result<Var> {
        if ctx.is_streaming() {
            if x.shape().len() != 2 || x.shape()[1] != self.feat_dim() {
                return Err(Error::shape("frontend", x.shape(), &[0, self.feat_dim()]));
            }
        } else {
            check_input(x, self.feat_dim())?;
        }
        match self {
            Frontend::Cntf(f) => f.forward_ctx(p, x, ctx),
            Frontend::Subsampling(f) => f.forward_ctx(p, x, ctx),
            Frontend::Cnn8(f) => f.forward_ctx(p, x, ctx),
        }
    }
}
