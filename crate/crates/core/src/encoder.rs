//! Conformer blocks, the stride-2 memory downsampler and the full encoder,
//! with one code path for full-utterance, padded and incremental runs.

use crate::autograd::Var;
use crate::config::{check_chunk, ChunkSpec, ConvNorm, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::nn::{
    dropout, sinusoid_table, Builder, Conv2d, FeedForward, Init, LayerNorm, Linear, Mask,
    MultiHeadAttention, ParamId, Pass, PosEncoding,
};
use crate::ops::{Activation, ConvSpec};
use crate::rng::RandomSource;
use crate::stream::{LayerCache, RunCtx, StreamState};
use crate::tensor::Tensor;

/// Draw the attention chunk for one call. `None` means full attention.
pub fn sample_chunk(spec: &ChunkSpec, rng: &mut RandomSource) -> Result<Option<usize>> {
    spec.validate()?;
    Ok(match *spec {
        ChunkSpec::Full => None,
        ChunkSpec::Fixed { size } => Some(size),
        ChunkSpec::Dynamic { full_prob, max } => {
            if rng.uniform() < full_prob {
                None
            } else {
                Some(2 * (1 + rng.below((max / 2) as u64) as usize))
            }
        }
    })
}

/// Query `q0 + i` sees key `j` iff `floor(j / size) <= floor((q0 + i) / size)`.
pub fn chunk_mask_at(q0: usize, rows: usize, cols: usize, size: Option<usize>) -> Mask {
    match size {
        None => Mask::full(rows, cols),
        Some(s) => Mask::from_fn(rows, cols, |i, j| j / s <= (q0 + i) / s),
    }
}

/// Self-attention mask for `t` frames.
pub fn make_chunk_mask(t: usize, spec: &ChunkSpec, rng: &mut RandomSource) -> Result<Mask> {
    Ok(chunk_mask_at(0, t, t, sample_chunk(spec, rng)?))
}

/// Pointwise `d → 2d`, GLU, depthwise time conv, norm, swish, pointwise `d → d`.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pw1: Linear,
    pub dw: Conv2d,
    pub norm: LayerNorm,
    pub norm_kind: ConvNorm,
    pub pw2: Linear,
    pub dropout: f64,
    pub d: usize,
}

impl ConvModule {
    pub fn new(
        b: &mut Builder,
        name: &str,
        d: usize,
        kernel: usize,
        norm_kind: ConvNorm,
        dropout: f64,
    ) -> Self {
        let mut s = b.scope(name);
        Self {
            pw1: Linear::new(&mut s, "pw1", d, 2 * d, true),
            dw: Conv2d::new(&mut s, "dw", ConvSpec::depthwise((kernel, 1), d), true),
            norm: LayerNorm::new(&mut s, "norm", d),
            norm_kind,
            pw2: Linear::new(&mut s, "pw2", d, d, true),
            dropout,
            d,
        }
    }

    pub fn param_count(d: usize, kernel: usize) -> usize {
        Linear::param_count(d, 2 * d, true)
            + Conv2d::param_count(&ConvSpec::depthwise((kernel, 1), d), true)
            + 2 * d
            + Linear::param_count(d, d, true)
    }

    pub(crate) fn forward_ctx(&self, p: &mut Pass, x: &Var, ctx: &mut RunCtx) -> Result<Var> {
        let t = x.shape()[0];
        let h = self.pw1.forward(p, x)?.glu()?;
        let h = h.transpose()?.reshape(&[self.d, t, 1])?;
        let h = ctx
            .conv(p, &self.dw, &h)?
            .reshape(&[self.d, t])?
            .transpose()?;
        let h = match self.norm_kind {
            ConvNorm::LayerNorm => self.norm.forward(p, &h)?,
            ConvNorm::BatchNorm => h.mul(p.var(self.norm.gamma))?.add(p.var(self.norm.beta))?,
        };
        let h = self.pw2.forward(p, &h.swish()?)?;
        dropout(p, &h, self.dropout)
    }
}

/// Macaron Conformer block:
/// `x + ½FFN → + MHSA → + Conv → + ½FFN → LN`, each branch pre-normed.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub norm_ff1: LayerNorm,
    pub ff1: FeedForward,
    pub norm_mha: LayerNorm,
    pub mha: MultiHeadAttention,
    pub norm_conv: LayerNorm,
    pub conv: ConvModule,
    pub norm_ff2: LayerNorm,
    pub ff2: FeedForward,
    pub norm_out: LayerNorm,
    pub dropout: f64,
}

impl ConformerBlock {
    pub fn new(b: &mut Builder, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.d;
        let relative = cfg.pos_encoding == PosEncoding::Relative;
        let mut s = b.scope(name);
        Self {
            norm_ff1: LayerNorm::new(&mut s, "norm_ff1", d),
            ff1: FeedForward::new(
                &mut s,
                "ff1",
                d,
                cfg.ffn_dim,
                Activation::Swish,
                cfg.dropout,
            ),
            norm_mha: LayerNorm::new(&mut s, "norm_mha", d),
            mha: MultiHeadAttention::new(&mut s, "mha", d, cfg.heads, cfg.attn_dropout, relative),
            norm_conv: LayerNorm::new(&mut s, "norm_conv", d),
            conv: ConvModule::new(
                &mut s,
                "conv",
                d,
                cfg.conv_kernel,
                cfg.conv_norm,
                cfg.dropout,
            ),
            norm_ff2: LayerNorm::new(&mut s, "norm_ff2", d),
            ff2: FeedForward::new(
                &mut s,
                "ff2",
                d,
                cfg.ffn_dim,
                Activation::Swish,
                cfg.dropout,
            ),
            norm_out: LayerNorm::new(&mut s, "norm_out", d),
            dropout: cfg.dropout,
        }
    }

    pub fn param_count(cfg: &EncoderConfig) -> usize {
        let d = cfg.d;
        5 * 2 * d
            + 2 * FeedForward::param_count(d, cfg.ffn_dim)
            + MultiHeadAttention::param_count(d, cfg.pos_encoding == PosEncoding::Relative)
            + ConvModule::param_count(d, cfg.conv_kernel)
    }

    /// Full-utterance block with a non-causal conv.
    pub fn forward(&self, p: &mut Pass, x: &Var, mask: &Mask) -> Result<Var> {
        self.forward_ctx(p, x, mask, &mut RunCtx::full(false, None), 0)
    }

    pub(crate) fn forward_ctx(
        &self,
        p: &mut Pass,
        x: &Var,
        mask: &Mask,
        ctx: &mut RunCtx,
        layer: usize,
    ) -> Result<Var> {
        let h = self.ff1.forward(p, &self.norm_ff1.forward(p, x)?)?;
        let x = x.add(&dropout(p, &h, self.dropout)?.scale(0.5)?)?;

        let xn = self.norm_mha.forward(p, &x)?;
        let h = self.self_attention(p, &xn, mask, ctx, layer)?;
        let x = x.add(&dropout(p, &h, self.dropout)?)?;

        let h = self
            .conv
            .forward_ctx(p, &self.norm_conv.forward(p, &x)?, ctx)?;
        let x = x.add(&h)?;

        let h = self.ff2.forward(p, &self.norm_ff2.forward(p, &x)?)?;
        let x = x.add(&dropout(p, &h, self.dropout)?.scale(0.5)?)?;
        self.norm_out.forward(p, &x)
    }

    fn self_attention(
        &self,
        p: &mut Pass,
        xn: &Var,
        mask: &Mask,
        ctx: &mut RunCtx,
        layer: usize,
    ) -> Result<Var> {
        let Some(state) = ctx.stream.as_deref_mut() else {
            return self.mha.forward(p, xn, xn, mask);
        };
        let cache = &mut state.layers[layer];
        let n = xn.shape()[0];
        let q0 = cache.len();
        let (k_new, v_new) = self.mha.project_kv(p, xn)?;
        let (k, v) = match (&cache.keys, &cache.values) {
            (Some(k), Some(v)) => (
                Var::concat(&[Var::constant(k.clone()), k_new], 0)?,
                Var::concat(&[Var::constant(v.clone()), v_new], 0)?,
            ),
            _ => (k_new, v_new),
        };
        cache.keys = Some(k.value().clone());
        cache.values = Some(v.value().clone());
        let rel = if self.mha.is_relative() {
            let lo = 1 - n as i64;
            let count = q0 + 2 * n - 1;
            Some(Var::constant(self.cached_positions(p, cache, lo, count)?))
        } else {
            None
        };
        self.mha.attend(p, xn, &k, &v, mask, rel.as_ref())
    }

    /// Projected encodings for distances `lo .. lo + count`, extending the
    /// cache on either side as needed.
    fn cached_positions(
        &self,
        p: &Pass,
        cache: &mut LayerCache,
        lo: i64,
        count: usize,
    ) -> Result<Tensor> {
        let hi = lo + count as i64;
        let project = |first: i64, end: i64| -> Result<Tensor> {
            let table = sinusoid_table(first, (end - first) as usize, self.mha.d);
            Ok(self
                .mha
                .project_positions(p, &Var::constant(table))?
                .value()
                .clone())
        };
        let table = match cache.pos.take() {
            None => {
                cache.pos_lo = lo;
                project(lo, hi)?
            }
            Some(mut t) => {
                let (c_lo, c_hi) = (cache.pos_lo, cache.pos_lo + t.shape()[0] as i64);
                if lo < c_lo {
                    t = Tensor::cat_rows(&[project(lo, c_lo)?, t])?;
                    cache.pos_lo = lo;
                }
                if hi > c_hi {
                    t = Tensor::cat_rows(&[t, project(c_hi, hi)?])?;
                }
                t
            }
        };
        let out = table.slice_rows((lo - cache.pos_lo) as usize, count)?;
        cache.pos = Some(table);
        Ok(out)
    }
}

/// Stride-2 two-tap memory, then swish and LayerNorm.
#[derive(Clone, Debug)]
pub struct DownsampleModule {
    pub taps: ParamId,
    pub norm: LayerNorm,
    pub d: usize,
}

impl DownsampleModule {
    pub fn new(b: &mut Builder, name: &str, d: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            taps: s.param("taps", &[2, d], Init::Const(0.5)),
            norm: LayerNorm::new(&mut s, "norm", d),
            d,
        }
    }

    pub fn param_count(d: usize) -> usize {
        4 * d
    }

    /// `[T × d]` → `[floor(T/2) × d]`.
    pub fn forward(&self, p: &mut Pass, h: &Var) -> Result<Var> {
        let y = h.fsmn(p.var(self.taps))?.swish()?;
        self.norm.forward(p, &y)
    }

    /// Streaming form: pairs continue across calls, an unpaired frame is
    /// carried to the next one. Returns `None` when no pair completes.
    pub(crate) fn forward_stream(
        &self,
        p: &mut Pass,
        h: &Var,
        state: &mut StreamState,
    ) -> Result<Option<Var>> {
        let h = match state.fsmn_carry.take() {
            Some(c) => Var::concat(&[Var::constant(c), h.clone()], 0)?,
            None => h.clone(),
        };
        let t = h.shape()[0];
        if t % 2 == 1 {
            state.fsmn_carry = Some(h.narrow(0, t - 1, 1)?.value().clone());
        }
        if t < 2 {
            return Ok(None);
        }
        let paired = if t % 2 == 1 {
            h.narrow(0, 0, t - 1)?
        } else {
            h
        };
        self.forward(p, &paired).map(Some)
    }
}

/// Options of one full-utterance encoder call.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Override the configured chunking.
    pub chunk: Option<ChunkSpec>,
    /// Real input frames when `x` carries trailing padding.
    pub valid_frames: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub h: Var,
    /// Output frames that correspond to real input.
    pub valid: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub frontend: Frontend,
    pub layers: Vec<ConformerBlock>,
    pub downsample: Option<DownsampleModule>,
    pub after_norm: LayerNorm,
    name: String,
}

impl Encoder {
    pub fn new(b: &mut Builder, name: &str, cfg: &EncoderConfig) -> Self {
        let mut s = b.scope("encoder");
        let frontend = Frontend::new(&mut s, &cfg.frontend, cfg.feat_dim, cfg.d);
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut downsample = None;
        for i in 0..cfg.layers {
            if cfg.downsample_after == Some(i) {
                downsample = Some(DownsampleModule::new(&mut s, "downsample", cfg.d));
            }
            layers.push(ConformerBlock::new(&mut s, &format!("layers.{i}"), cfg));
        }
        let after_norm = LayerNorm::new(&mut s, "after_norm", cfg.d);
        Self {
            cfg: cfg.clone(),
            frontend,
            layers,
            downsample,
            after_norm,
            name: name.to_string(),
        }
    }

    /// Encode with the configured chunking.
    pub fn forward(&self, p: &mut Pass, x: &Var) -> Result<Var> {
        Ok(self.forward_opts(p, x, &ForwardOptions::default())?.h)
    }

    pub fn forward_opts(
        &self,
        p: &mut Pass,
        x: &Var,
        opts: &ForwardOptions,
    ) -> Result<EncoderOutput> {
        let spec = opts.chunk.unwrap_or(self.cfg.chunk);
        let chunk = if p.training() || !matches!(spec, ChunkSpec::Dynamic { .. }) {
            sample_chunk(&spec, p.rng())?
        } else {
            spec.validate()?;
            None
        };
        // A causal model without chunking attends causally frame by frame.
        let chunk = match chunk {
            None if self.cfg.causal => Some(1),
            c => c,
        };
        if let Some(v) = opts.valid_frames {
            if v == 0 || v > x.shape()[0] {
                return Err(Error::InvalidArgument(format!(
                    "valid frames {v} outside [1, {}]",
                    x.shape()[0]
                )));
            }
        }
        let mut ctx = RunCtx::full(self.cfg.causal, opts.valid_frames);
        let mut h = self.frontend.forward_ctx(p, x, &mut ctx)?;
        h = self.add_absolute(&h, 0)?;
        let mut size = chunk;
        let mut mask = self.mask(h.shape()[0], size, ctx.valid);
        for (i, layer) in self.layers.iter().enumerate() {
            if let (Some(ds), true) = (&self.downsample, self.cfg.downsample_after == Some(i)) {
                h = ds.forward(p, &h)?;
                ctx.valid = ctx.valid.map(|v| v / 2);
                if ctx.valid == Some(0) {
                    return Err(Error::TooShort {
                        frames: opts.valid_frames.unwrap_or(0),
                        min: 8,
                    });
                }
                size = size.map(|s| (s / 2).max(1));
                mask = self.mask(h.shape()[0], size, ctx.valid);
            }
            h = layer.forward_ctx(p, &h, &mask, &mut ctx, i)?;
        }
        let h = self.after_norm.forward(p, &h)?;
        let valid = ctx.valid.unwrap_or(h.shape()[0]);
        Ok(EncoderOutput { h, valid })
    }

    fn mask(&self, t: usize, size: Option<usize>, valid: Option<usize>) -> Mask {
        let m = chunk_mask_at(0, t, t, size);
        match valid {
            Some(v) => m.restrict_keys(v),
            None => m,
        }
    }

    fn add_absolute(&self, h: &Var, offset: usize) -> Result<Var> {
        if self.cfg.pos_encoding != PosEncoding::Absolute {
            return Ok(h.clone());
        }
        let pe = sinusoid_table(offset as i64, h.shape()[0], self.cfg.d);
        h.add(&Var::constant(pe))
    }

    /// Fresh incremental state. `chunk` is in post-frontend frames.
    pub fn start_stream(&self, chunk: usize) -> Result<StreamState> {
        if !self.cfg.causal {
            return Err(Error::Stream("streaming needs a causal encoder".into()));
        }
        check_chunk(chunk)?;
        Ok(StreamState::new(&self.name, chunk, self.layers.len()))
    }

    /// Input frames per full step for a state's chunk.
    pub fn step_frames(&self, state: &StreamState) -> usize {
        4 * state.chunk
    }

    /// Encode the next `n` feature frames (`n` a positive multiple of 8).
    /// A step that is not a whole number of chunks ends the stream.
    pub fn stream_step(&self, p: &mut Pass, feats: &Var, state: &mut StreamState) -> Result<Var> {
        state.check_model(&self.name, self.layers.len())?;
        if state.finished {
            return Err(Error::Stream(
                "stream already ended on a partial chunk".into(),
            ));
        }
        let n = feats.shape().first().copied().unwrap_or(0);
        if n == 0 || n % 8 != 0 {
            return Err(Error::Stream(format!(
                "{n} frames is not a positive multiple of 8"
            )));
        }
        let cs = state.chunk;
        let q_mid = state.frames_mid;
        let q_out = state.frames_out;
        let mut ctx = RunCtx::streaming(state);
        let mut h = self.frontend.forward_ctx(p, feats, &mut ctx)?;
        h = self.add_absolute(&h, q_mid)?;
        let n_mid = h.shape()[0];
        let mut mask = chunk_mask_at(q_mid, n_mid, q_mid + n_mid, Some(cs));
        let mut n_out = n_mid;
        for (i, layer) in self.layers.iter().enumerate() {
            if let (Some(ds), true) = (&self.downsample, self.cfg.downsample_after == Some(i)) {
                let state = ctx.stream.as_deref_mut().expect("streaming context");
                h = ds
                    .forward_stream(p, &h, state)?
                    .ok_or_else(|| Error::Stream("step produced no downsampled frame".into()))?;
                n_out = h.shape()[0];
                mask = chunk_mask_at(q_out, n_out, q_out + n_out, Some(cs / 2));
            }
            h = layer.forward_ctx(p, &h, &mask, &mut ctx, i)?;
        }
        let h = self.after_norm.forward(p, &h)?;
        state.frames_in += n;
        state.frames_mid += n_mid;
        state.frames_out += if self.downsample.is_some() {
            n_out
        } else {
            n_mid
        };
        if n % (4 * cs) != 0 {
            state.finished = true;
        }
        Ok(h)
    }
}
