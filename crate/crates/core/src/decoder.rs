//! Pre-norm Transformer decoder trained with teacher forcing and
//! label-smoothed cross-entropy.

use crate::autograd::Var;
use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::{
    dropout, sinusoid_table, Builder, FeedForward, Init, LayerNorm, Linear, Mask,
    MultiHeadAttention, ParamId, Pass,
};
use crate::ops::Activation;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new(b: &mut Builder, name: &str, cfg: &DecoderConfig) -> Self {
        let d = cfg.d;
        let mut s = b.scope(name);
        Self {
            norm_self: LayerNorm::new(&mut s, "norm_self", d),
            self_attn: MultiHeadAttention::new(
                &mut s,
                "self_attn",
                d,
                cfg.heads,
                cfg.attn_dropout,
                false,
            ),
            norm_cross: LayerNorm::new(&mut s, "norm_cross", d),
            cross_attn: MultiHeadAttention::new(
                &mut s,
                "cross_attn",
                d,
                cfg.heads,
                cfg.attn_dropout,
                false,
            ),
            norm_ff: LayerNorm::new(&mut s, "norm_ff", d),
            ff: FeedForward::new(&mut s, "ff", d, cfg.ffn_dim, Activation::Relu, cfg.dropout),
            dropout: cfg.dropout,
        }
    }

    pub fn param_count(cfg: &DecoderConfig) -> usize {
        3 * 2 * cfg.d
            + 2 * MultiHeadAttention::param_count(cfg.d, false)
            + FeedForward::param_count(cfg.d, cfg.ffn_dim)
    }

    pub fn forward(
        &self,
        p: &mut Pass,
        x: &Var,
        memory: &Var,
        self_mask: &Mask,
        cross_mask: &Mask,
    ) -> Result<Var> {
        let xn = self.norm_self.forward(p, x)?;
        let h = self.self_attn.forward(p, &xn, &xn, self_mask)?;
        let x = x.add(&dropout(p, &h, self.dropout)?)?;
        let xn = self.norm_cross.forward(p, &x)?;
        let h = self.cross_attn.forward(p, &xn, memory, cross_mask)?;
        let x = x.add(&dropout(p, &h, self.dropout)?)?;
        let h = self.ff.forward(p, &self.norm_ff.forward(p, &x)?)?;
        x.add(&dropout(p, &h, self.dropout)?)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub after_norm: LayerNorm,
    pub out: Linear,
    pub classes: usize,
    pub d: usize,
    pub dropout: f64,
}

impl Decoder {
    /// `classes` counts every output id including start/end.
    pub fn new(b: &mut Builder, cfg: &DecoderConfig, classes: usize) -> Self {
        let mut s = b.scope("decoder");
        let embed = s.param(
            "embed",
            &[classes, cfg.d],
            Init::Normal(1.0 / (cfg.d as f64).sqrt()),
        );
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("layers.{i}"), cfg))
            .collect();
        Self {
            embed,
            layers,
            after_norm: LayerNorm::new(&mut s, "after_norm", cfg.d),
            out: Linear::new(&mut s, "out", cfg.d, classes, true),
            classes,
            d: cfg.d,
            dropout: cfg.dropout,
        }
    }

    pub fn param_count(cfg: &DecoderConfig, classes: usize) -> usize {
        classes * cfg.d
            + cfg.layers * DecoderLayer::param_count(cfg)
            + 2 * cfg.d
            + Linear::param_count(cfg.d, classes, true)
    }

    /// Logits `[n × classes]` for input ids, attending over `memory`, of
    /// which the first `memory_valid` frames are real.
    pub fn forward(
        &self,
        p: &mut Pass,
        ids: &[usize],
        memory: &Var,
        memory_valid: usize,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument(
                "decoder needs at least one input id".into(),
            ));
        }
        let n = ids.len();
        let x = p
            .var(self.embed)
            .embedding(ids)?
            .scale((self.d as f64).sqrt())?;
        let x = x.add(&Var::constant(sinusoid_table(0, n, self.d)))?;
        let mut x = dropout(p, &x, self.dropout)?;
        let self_mask = Mask::causal(n);
        let cross_mask = Mask::full(n, memory.shape()[0]).restrict_keys(memory_valid);
        for layer in &self.layers {
            x = layer.forward(p, &x, memory, &self_mask, &cross_mask)?;
        }
        self.out.forward(p, &self.after_norm.forward(p, &x)?)
    }
}

/// Mean over positions of the smoothed cross-entropy: the target gets weight
/// `1 - eps` and every other class `eps / (K - 1)`.
pub fn smoothed_cross_entropy(logits: &Var, targets: &[usize], eps: f64) -> Result<Var> {
    let [n, k] = *logits.shape() else {
        return Err(Error::invalid_shape(
            "cross entropy",
            logits.shape(),
            "expected [N, K]",
        ));
    };
    if targets.len() != n || n == 0 {
        return Err(Error::shape(
            "cross entropy",
            logits.shape(),
            &[targets.len(), k],
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidLabel {
            label: bad,
            vocab: k,
        });
    }
    if !(0.0..1.0).contains(&eps) || k < 2 {
        return Err(Error::InvalidArgument(format!(
            "smoothing {eps} with {k} classes"
        )));
    }
    let off = eps / (k - 1) as f64;
    let w = Tensor::from_fn(&[n, k], |i| {
        if targets[i / k] == i % k {
            1.0 - eps
        } else {
            off
        }
    });
    logits
        .log_softmax(1)?
        .mul_const(&w)?
        .sum()?
        .scale(-1.0 / n as f64)
}

/// Teacher-forced decoder loss: input `sos + y`, target `y + eos`.
pub fn att_loss(
    decoder: &Decoder,
    p: &mut Pass,
    memory: &Var,
    memory_valid: usize,
    labels: &[usize],
    sos_eos: usize,
    eps: f64,
) -> Result<Var> {
    let mut input = Vec::with_capacity(labels.len() + 1);
    input.push(sos_eos);
    input.extend_from_slice(labels);
    let mut target = labels.to_vec();
    target.push(sos_eos);
    let logits = decoder.forward(p, &input, memory, memory_valid)?;
    smoothed_cross_entropy(&logits, &target, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let l = Var::constant(Tensor::zeros(&[3, 9]));
        let loss = smoothed_cross_entropy(&l, &[1, 2, 8], 0.0)
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - 9f64.ln()).abs() < 1e-14);
        let smoothed = smoothed_cross_entropy(&l, &[1, 2, 8], 0.1)
            .unwrap()
            .item()
            .unwrap();
        assert!((smoothed - 9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_prediction_hits_the_smoothing_floor() {
        let (k, eps, big) = (5, 0.1, 40.0);
        let l = Var::constant(Tensor::from_fn(&[1, k], |i| if i == 2 { big } else { 0.0 }));
        let loss = smoothed_cross_entropy(&l, &[2], eps)
            .unwrap()
            .item()
            .unwrap();
        let z = big.exp() + (k - 1) as f64;
        let expected = -(1.0 - eps) * (big - z.ln()) - eps * (-z.ln());
        assert!((loss - expected).abs() < 1e-12);
    }
}
