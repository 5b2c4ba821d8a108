//! Parameterized layers and the stochastic residual helpers.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::params::{Builder, Init, ParamId, Pass};
use crate::ops::{Activation, ConvSpec, LAYER_NORM_EPS};
use crate::tensor::Tensor;

/// `y = x · W + b` over the last axis; `W` is `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let w = s.param("weight", &[din, dout], Init::FanIn(din));
        let bias = bias.then(|| s.param("bias", &[dout], Init::Zeros));
        Self {
            w,
            b: bias,
            din,
            dout,
        }
    }

    pub fn param_count(din: usize, dout: usize, bias: bool) -> usize {
        din * dout + if bias { dout } else { 0 }
    }

    pub fn forward(&self, p: &Pass, x: &Var) -> Result<Var> {
        let shape = x.shape().to_vec();
        if shape.last() != Some(&self.din) {
            return Err(Error::shape("linear", &shape, &[self.din, self.dout]));
        }
        let rows = x.value().numel() / self.din;
        let flat = if shape.len() == 2 {
            x.clone()
        } else {
            x.reshape(&[rows, self.din])?
        };
        let mut y = flat.matmul(p.var(self.w))?;
        if let Some(b) = self.b {
            y = y.add(p.var(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.dout;
            y.reshape(&out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            gamma: s.param("gamma", &[dim], Init::Ones),
            beta: s.param("beta", &[dim], Init::Zeros),
            dim,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, p: &Pass, x: &Var) -> Result<Var> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// Convolution layer over `[C × T × F]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, spec: ConvSpec, bias: bool) -> Self {
        spec.validate().expect("conv spec");
        let mut s = b.scope(name);
        let (kt, kf) = spec.kernel;
        let fan_in = if spec.depthwise {
            kt * kf
        } else {
            spec.channels.0 * kt * kf
        };
        let w = s.param("weight", &spec.weight_shape(), Init::FanIn(fan_in));
        let bias = bias.then(|| s.param("bias", &[spec.channels.1], Init::Zeros));
        Self { w, b: bias, spec }
    }

    pub fn param_count(spec: &ConvSpec, bias: bool) -> usize {
        spec.weight_count() + if bias { spec.channels.1 } else { 0 }
    }

    pub fn forward(&self, p: &Pass, x: &Var) -> Result<Var> {
        self.forward_with(p, x, &self.spec)
    }

    /// Same weights under a different padding mode.
    pub fn forward_with(&self, p: &Pass, x: &Var, spec: &ConvSpec) -> Result<Var> {
        x.conv2d(p.var(self.w), self.b.map(|b| p.var(b)), spec)
    }
}

/// Position-wise feed-forward: `Linear → act → dropout → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
    pub act: Activation,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        b: &mut Builder,
        name: &str,
        d: usize,
        hidden: usize,
        act: Activation,
        dropout: f64,
    ) -> Self {
        let mut s = b.scope(name);
        Self {
            w1: Linear::new(&mut s, "w1", d, hidden, true),
            w2: Linear::new(&mut s, "w2", hidden, d, true),
            act,
            dropout,
        }
    }

    pub fn param_count(d: usize, hidden: usize) -> usize {
        Linear::param_count(d, hidden, true) + Linear::param_count(hidden, d, true)
    }

    pub fn forward(&self, p: &mut Pass, x: &Var) -> Result<Var> {
        let h = self.w1.forward(p, x)?.activation(self.act)?;
        let h = dropout(p, &h, self.dropout)?;
        self.w2.forward(p, &h)
    }
}

/// Inverted dropout; identity in eval mode or at `prob == 0`.
pub fn dropout(p: &mut Pass, x: &Var, prob: f64) -> Result<Var> {
    if !p.training() || prob == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - prob;
    let rng = p.rng();
    let mask = Tensor::from_fn(x.shape(), |_| {
        if rng.bernoulli(keep) {
            1.0 / keep
        } else {
            0.0
        }
    });
    x.mul_const(&mask)
}

/// `x + s · (gamma ⊙ b)` where `gamma` (over the last axis) is optional.
/// Training draws `s ~ Bernoulli(1 - drop)` once for the whole branch;
/// eval uses `s = 1 - drop` and reads no randomness.
pub fn residual_branch(
    p: &mut Pass,
    x: &Var,
    b: &Var,
    gamma: Option<&Var>,
    drop: f64,
) -> Result<Var> {
    if x.shape() != b.shape() {
        return Err(Error::shape("residual_branch", x.shape(), b.shape()));
    }
    let scaled = match gamma {
        Some(g) => b.mul(g)?,
        None => b.clone(),
    };
    let s = if drop == 0.0 {
        1.0
    } else if p.training() {
        if p.rng().bernoulli(1.0 - drop) {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - drop
    };
    if s == 1.0 {
        x.add(&scaled)
    } else {
        x.add(&scaled.scale(s)?)
    }
}
