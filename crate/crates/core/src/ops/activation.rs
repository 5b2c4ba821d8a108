//! Pointwise nonlinearities.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Swish,
    Relu,
    Glu,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via `erf`.
pub(crate) fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Var {
    fn pointwise(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Var> {
        let value = self.value().map(f);
        Var::from_op(op, value, vec![self.clone()], move |cx| {
            let x = cx.parents[0].data();
            let g = cx.grad.data();
            vec![Some(Tensor::from_fn(cx.grad.shape(), |i| g[i] * df(x[i])))]
        })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Result<Var> {
        self.pointwise("gelu", |x| x * phi_cdf(x), |x| phi_cdf(x) + x * phi_pdf(x))
    }

    /// Swish / SiLU, `x·σ(x)`.
    pub fn swish(&self) -> Result<Var> {
        self.pointwise(
            "swish",
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Result<Var> {
        self.pointwise("relu", |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.pointwise("sigmoid", sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    /// Gated linear unit over the last axis: first half gated by σ(second half).
    pub fn glu(&self) -> Result<Var> {
        let shape = self.shape().to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::invalid_shape("glu", &shape, "scalar"))?;
        if last % 2 != 0 {
            return Err(Error::invalid_shape("glu", &shape, "odd last extent"));
        }
        let h = last / 2;
        let rows = self.value().numel() / last;
        let x = self.data();
        let mut out = Vec::with_capacity(rows * h);
        for r in 0..rows {
            let row = &x[r * last..(r + 1) * last];
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = h;
        let value = Tensor::from_parts(out_shape, out);
        Var::from_op("glu", value, vec![self.clone()], move |cx| {
            let x = cx.parents[0].data();
            let g = cx.grad.data();
            let mut gx = vec![0.0; rows * last];
            for r in 0..rows {
                for j in 0..h {
                    let a = x[r * last + j];
                    let s = sigmoid(x[r * last + h + j]);
                    let go = g[r * h + j];
                    gx[r * last + j] = go * s;
                    gx[r * last + h + j] = go * a * s * (1.0 - s);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    pub fn activation(&self, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Gelu => self.gelu(),
            Activation::Swish => self.swish(),
            Activation::Relu => self.relu(),
            Activation::Glu => self.glu(),
        }
    }
}
