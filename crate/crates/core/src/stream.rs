//! Execution context shared by full-utterance and incremental encoding.
//!
//! The encoder is written once. A [`RunCtx`] decides how each time-mixing
//! convolution pads its past: with zeros (full utterance), or with the frames
//! kept from the previous step (streaming). It also tracks how many frames
//! are real when a padded batch is encoded.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Pass};
use crate::ops::{ConvSpec, Padding};
use crate::tensor::Tensor;

/// Per-layer attention history.
#[derive(Clone, Debug, Default)]
pub(crate) struct LayerCache {
    pub keys: Option<Tensor>,
    pub values: Option<Tensor>,
    /// Projected relative encodings for distances `pos_lo ..`.
    pub pos_lo: i64,
    pub pos: Option<Tensor>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.shape()[0])
    }
}

/// Incremental-encoding state of one utterance.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub(crate) model: String,
    pub(crate) chunk: usize,
    pub(crate) conv: Vec<Option<Tensor>>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) fsmn_carry: Option<Tensor>,
    pub(crate) frames_in: usize,
    pub(crate) frames_mid: usize,
    pub(crate) frames_out: usize,
    pub(crate) finished: bool,
}

impl StreamState {
    pub(crate) fn new(model: &str, chunk: usize, layers: usize) -> Self {
        Self {
            model: model.to_string(),
            chunk,
            conv: Vec::new(),
            layers: vec![LayerCache::default(); layers],
            fsmn_carry: None,
            frames_in: 0,
            frames_mid: 0,
            frames_out: 0,
            finished: false,
        }
    }

    /// Attention chunk in post-frontend frames.
    pub fn chunk(&self) -> usize {
        self.chunk
    }

    /// Input feature frames consumed so far.
    pub fn frames_in(&self) -> usize {
        self.frames_in
    }

    /// Encoder frames emitted so far.
    pub fn frames_out(&self) -> usize {
        self.frames_out
    }

    /// True once a step ended inside a chunk; no further input is accepted.
    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub(crate) fn check_model(&self, model: &str, layers: usize) -> Result<()> {
        if self.model != model || self.layers.len() != layers {
            return Err(Error::Stream(format!(
                "state belongs to {} ({} layers), not {model} ({layers} layers)",
                self.model,
                self.layers.len()
            )));
        }
        Ok(())
    }
}

pub(crate) struct RunCtx<'s> {
    pub causal: bool,
    /// Real frames at the current rate when the input is padded.
    pub valid: Option<usize>,
    pub stream: Option<&'s mut StreamState>,
    slot: usize,
}

impl<'s> RunCtx<'s> {
    pub fn full(causal: bool, valid: Option<usize>) -> Self {
        Self {
            causal,
            valid,
            stream: None,
            slot: 0,
        }
    }

    pub fn streaming(state: &'s mut StreamState) -> Self {
        Self {
            causal: true,
            valid: None,
            stream: Some(state),
            slot: 0,
        }
    }

    pub fn is_streaming(&self) -> bool {
        self.stream.is_some()
    }

    /// Apply a conv layer to `[C × T × F]`, treating time per the context.
    /// Padding frames are zeroed first so they act exactly like padding.
    pub fn conv(&mut self, p: &Pass, layer: &Conv2d, x: &Var) -> Result<Var> {
        let kt = layer.spec.kernel.0;
        let st = layer.spec.stride.0;
        let x = match self.valid {
            Some(v) if kt > 1 => x.keep_prefix(1, v)?,
            _ => x.clone(),
        };
        let y = match self.stream.as_deref_mut() {
            Some(state) if kt > 1 => {
                let slot = self.slot;
                self.slot += 1;
                if state.conv.len() <= slot {
                    state.conv.resize(slot + 1, None);
                }
                let [c, t, f] = *x.shape() else {
                    return Err(Error::invalid_shape(
                        "stream conv",
                        x.shape(),
                        "expected [C, T, F]",
                    ));
                };
                if t % st != 0 {
                    return Err(Error::Stream(format!(
                        "{t} frames do not align with time stride {st}"
                    )));
                }
                let past = state.conv[slot]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&[c, kt - 1, f]));
                let joined = Var::concat(&[Var::constant(past), x.detach()], 1)?;
                let total = joined.shape()[1];
                state.conv[slot] =
                    Some(joined.narrow(1, total - (kt - 1), kt - 1)?.value().clone());
                layer.forward_with(
                    p,
                    &joined,
                    &with_padding(&layer.spec, Padding::ValidTimeSameFreq),
                )?
            }
            _ => {
                let padding = if self.causal {
                    Padding::CausalTimeSameFreq
                } else {
                    Padding::Same
                };
                layer.forward_with(p, &x, &with_padding(&layer.spec, padding))?
            }
        };
        if let Some(v) = self.valid.as_mut() {
            *v = v.div_ceil(st);
        }
        Ok(y)
    }
}

fn with_padding(spec: &ConvSpec, padding: Padding) -> ConvSpec {
    spec.with_padding(padding)
}
