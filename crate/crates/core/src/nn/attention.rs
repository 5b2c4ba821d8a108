//! Multi-head attention with optional relative sinusoidal positions
//! (content and position terms with learned per-head biases `u`, `v`).

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::layers::{dropout, Linear};
use crate::nn::mask::Mask;
use crate::nn::params::{Builder, Init, ParamId, Pass};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    #[default]
    Relative,
    Absolute,
    None,
}

/// Sinusoidal encodings for consecutive (possibly negative) positions
/// `first, first + 1, ...`; `[count × d]`.
pub fn sinusoid_table(first: i64, count: usize, d: usize) -> Tensor {
    let freqs: Vec<f64> = (0..d.div_ceil(2))
        .map(|i| (-((2 * i) as f64) * 10000f64.ln() / d as f64).exp())
        .collect();
    let mut data = Vec::with_capacity(count * d);
    for r in 0..count {
        let pos = (first + r as i64) as f64;
        for j in 0..d {
            let a = pos * freqs[j / 2];
            data.push(if j % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::from_parts(vec![count, d], data)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// Relative mode only: position projection and the `u`/`v` biases `[h × d/h]`.
    pub pos: Option<Linear>,
    pub bias_u: Option<ParamId>,
    pub bias_v: Option<ParamId>,
    pub heads: usize,
    pub d: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(
        b: &mut Builder,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
        relative: bool,
    ) -> Self {
        assert!(
            heads > 0 && d.is_multiple_of(heads),
            "d={d} not divisible by heads={heads}"
        );
        let dh = d / heads;
        let mut s = b.scope(name);
        let q = Linear::new(&mut s, "q", d, d, true);
        let k = Linear::new(&mut s, "k", d, d, true);
        let v = Linear::new(&mut s, "v", d, d, true);
        let o = Linear::new(&mut s, "o", d, d, true);
        let (pos, bias_u, bias_v) = if relative {
            (
                Some(Linear::new(&mut s, "pos", d, d, false)),
                Some(s.param("bias_u", &[heads, dh], Init::FanIn(dh))),
                Some(s.param("bias_v", &[heads, dh], Init::FanIn(dh))),
            )
        } else {
            (None, None, None)
        };
        Self {
            q,
            k,
            v,
            o,
            pos,
            bias_u,
            bias_v,
            heads,
            d,
            dropout,
        }
    }

    pub fn param_count(d: usize, relative: bool) -> usize {
        4 * Linear::param_count(d, d, true) + if relative { d * d + 2 * d } else { 0 }
    }

    pub fn is_relative(&self) -> bool {
        self.pos.is_some()
    }

    pub fn project_kv(&self, p: &Pass, x: &Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(p, x)?, self.v.forward(p, x)?))
    }

    /// Project a raw sinusoid table through the position weights.
    pub fn project_positions(&self, p: &Pass, table: &Var) -> Result<Var> {
        match &self.pos {
            Some(l) => l.forward(p, table),
            None => Err(Error::InvalidArgument(
                "attention has no relative positions".into(),
            )),
        }
    }

    /// Self/cross attention from raw inputs. Relative mode computes the
    /// position table for query offset 0.
    pub fn forward(&self, p: &mut Pass, xq: &Var, xkv: &Var, mask: &Mask) -> Result<Var> {
        let (k, v) = self.project_kv(p, xkv)?;
        let rel = match self.pos {
            Some(_) => {
                let (nq, nk) = (xq.shape()[0], xkv.shape()[0]);
                let table = sinusoid_table(-(nk as i64 - 1), nq + nk - 1, self.d);
                Some(self.project_positions(p, &Var::constant(table))?)
            }
            None => None,
        };
        self.attend(p, xq, &k, &v, mask, rel.as_ref())
    }

    /// Attention of raw queries `xq [n_q × d]` over projected keys/values
    /// `[n_k × d]`. In relative mode `rel` holds projected encodings for
    /// distances `q0 - (n_k - 1) ..= q0 + n_q - 1` in ascending order, where
    /// `q0` is the absolute index of the first query.
    pub fn attend(
        &self,
        p: &mut Pass,
        xq: &Var,
        k: &Var,
        v: &Var,
        mask: &Mask,
        rel: Option<&Var>,
    ) -> Result<Var> {
        let (nq, nk) = (xq.shape()[0], k.shape()[0]);
        if mask.rows() != nq || mask.cols() != nk {
            return Err(Error::shape(
                "attention mask",
                &[nq, nk],
                &[mask.rows(), mask.cols()],
            ));
        }
        if let Some(r) = rel {
            if r.shape() != [nq + nk - 1, self.d] {
                return Err(Error::shape(
                    "attention positions",
                    r.shape(),
                    &[nq + nk - 1, self.d],
                ));
            }
        }
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(p, xq)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh)?;
            let kh = k.narrow(1, h * dh, dh)?;
            let vh = v.narrow(1, h * dh, dh)?;
            let scores = match (rel, self.bias_u, self.bias_v) {
                (Some(r), Some(u), Some(bv)) => {
                    let u = p.var(u).narrow(0, h, 1)?.reshape(&[dh])?;
                    let bv = p.var(bv).narrow(0, h, 1)?.reshape(&[dh])?;
                    let ac = qh.add(&u)?.matmul_t(&kh)?;
                    let rh = r.narrow(1, h * dh, dh)?;
                    let bd = qh.add(&bv)?.matmul_t(&rh)?.rel_shift(nk)?;
                    ac.add(&bd)?
                }
                _ => qh.matmul_t(&kh)?,
            };
            let attn = scores.scale(scale)?.masked_softmax(mask)?;
            let attn = dropout(p, &attn, self.dropout)?;
            heads.push(attn.matmul(&vh)?);
        }
        let cat = if heads.len() == 1 {
            heads.pop().unwrap()
        } else {
            Var::concat(&heads, 1)?
        };
        self.o.forward(p, &cat)
    }
}
