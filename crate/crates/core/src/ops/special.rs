//! Gathers and small structured ops: relative-position shift, the two-tap
//! strided memory layer, and embedding lookup.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Var {
    /// Re-index a `[n_q × (n_q + n_k - 1)]` score table, whose column `c`
    /// holds relative distance `c - (n_k - 1) + q0`, into `[n_q × n_k]` with
    /// `out[a][b] = full[a][a - b + n_k - 1]`, i.e. distance `(q0 + a) - b`.
    pub fn rel_shift(&self, n_k: usize) -> Result<Var> {
        let [nq, nd] = *self.shape() else {
            return Err(Error::invalid_shape(
                "rel_shift",
                self.shape(),
                "expected a matrix",
            ));
        };
        if n_k == 0 || nd != nq + n_k - 1 {
            return Err(Error::invalid_shape(
                "rel_shift",
                self.shape(),
                format!("needs {} columns for {n_k} keys", nq + n_k.max(1) - 1),
            ));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(nq * n_k);
        for a in 0..nq {
            for b in 0..n_k {
                out.push(x[a * nd + a + n_k - 1 - b]);
            }
        }
        let value = Tensor::from_parts(vec![nq, n_k], out);
        Var::from_op("rel_shift", value, vec![self.clone()], move |cx| {
            let g = cx.grad.data();
            let mut gx = vec![0.0; nq * nd];
            for a in 0..nq {
                for b in 0..n_k {
                    gx[a * nd + a + n_k - 1 - b] += g[a * n_k + b];
                }
            }
            vec![Some(Tensor::from_parts(vec![nq, nd], gx))]
        })
    }

    /// Two-tap stride-2 memory: `out[m] = w[0] ⊙ h[2m+1] + w[1] ⊙ h[2m]` for a
    /// `[T × d]` input and `[2 × d]` taps. A trailing unpaired frame is dropped.
    pub fn fsmn(&self, taps: &Var) -> Result<Var> {
        let [t, d] = *self.shape() else {
            return Err(Error::invalid_shape(
                "fsmn",
                self.shape(),
                "expected [T, d]",
            ));
        };
        if taps.shape() != [2, d] {
            return Err(Error::shape("fsmn", taps.shape(), &[2, d]));
        }
        if t < 2 {
            return Err(Error::TooShort { frames: t, min: 2 });
        }
        let m = t / 2;
        let h = self.data();
        let w = taps.data();
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            let (odd, even) = (
                &h[(2 * i + 1) * d..(2 * i + 2) * d],
                &h[2 * i * d..(2 * i + 1) * d],
            );
            for j in 0..d {
                out.push(w[j] * odd[j] + w[d + j] * even[j]);
            }
        }
        let value = Tensor::from_parts(vec![m, d], out);
        Var::from_op("fsmn", value, vec![self.clone(), taps.clone()], move |cx| {
            let g = cx.grad.data();
            let h = cx.parents[0].data();
            let w = cx.parents[1].data();
            let mut gh = vec![0.0; t * d];
            let mut gw = vec![0.0; 2 * d];
            for i in 0..m {
                for j in 0..d {
                    let go = g[i * d + j];
                    gh[(2 * i + 1) * d + j] = go * w[j];
                    gh[2 * i * d + j] = go * w[d + j];
                    gw[j] += go * h[(2 * i + 1) * d + j];
                    gw[d + j] += go * h[2 * i * d + j];
                }
            }
            vec![
                Some(Tensor::from_parts(vec![t, d], gh)),
                Some(Tensor::from_parts(vec![2, d], gw)),
            ]
        })
    }

    /// Rows of a `[V × d]` table selected by `ids`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var> {
        let [v, d] = *self.shape() else {
            return Err(Error::invalid_shape(
                "embedding",
                self.shape(),
                "expected [V, d]",
            ));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidLabel {
                label: bad,
                vocab: v,
            });
        }
        let table = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&table[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        let ids = ids.to_vec();
        Var::from_op("embedding", value, vec![self.clone()], move |cx| {
            let g = cx.grad.data();
            let mut gt = vec![0.0; v * d];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g[r * d + j];
                }
            }
            vec![Some(Tensor::from_parts(vec![v, d], gt))]
        })
    }

    /// Zero every entry whose index along `axis` is `>= valid`.
    pub fn keep_prefix(&self, axis: usize, valid: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid_shape(
                "keep_prefix",
                shape,
                format!("axis {axis}"),
            ));
        }
        if valid >= shape[axis] {
            return Ok(self.clone());
        }
        let (_, n, inner) = crate::ops::basic::axis_split(shape, axis);
        let mask = Tensor::from_fn(shape, |i| if (i / inner) % n < valid { 1.0 } else { 0.0 });
        self.mul_const(&mask)
    }
}
