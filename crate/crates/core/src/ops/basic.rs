//! Elementwise arithmetic, shape manipulation and reductions.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// `rhs` may equal `lhs` or be a trailing suffix of it (it is then repeated).
fn broadcast_len(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        Ok(numel(rhs))
    } else {
        Err(Error::shape(op, lhs, rhs))
    }
}

/// Sum a full-size gradient down to the broadcast operand.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let n = numel(shape);
    if n == g.numel() {
        return g.reshape(shape).expect("same numel");
    }
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Var {
    pub fn add(&self, rhs: &Var) -> Result<Var> {
        let nb = broadcast_len("add", self.shape(), rhs.shape())?;
        let b = rhs.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + b[i % nb])
            .collect();
        let value = Tensor::from_parts(self.shape().to_vec(), data);
        Var::from_op("add", value, vec![self.clone(), rhs.clone()], |cx| {
            vec![
                Some(cx.grad.clone()),
                Some(reduce_to(cx.grad, cx.parents[1].shape())),
            ]
        })
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.add(&rhs.scale(-1.0)?)
    }

    /// Elementwise product with suffix broadcasting of `rhs`.
    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        let nb = broadcast_len("mul", self.shape(), rhs.shape())?;
        let b = rhs.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * b[i % nb])
            .collect();
        let value = Tensor::from_parts(self.shape().to_vec(), data);
        Var::from_op("mul", value, vec![self.clone(), rhs.clone()], move |cx| {
            let (a, b) = (&cx.parents[0], &cx.parents[1]);
            let g = cx.grad.data();
            let ga = a.requires_grad().then(|| {
                let bd = b.data();
                Tensor::from_fn(a.shape(), |i| g[i] * bd[i % nb])
            });
            let gb = b.requires_grad().then(|| {
                let ad = a.data();
                let full = Tensor::from_fn(a.shape(), |i| g[i] * ad[i]);
                reduce_to(&full, b.shape())
            });
            vec![ga, gb]
        })
    }

    /// Multiply by a constant tensor of identical shape (masks, dropout).
    pub fn mul_const(&self, mask: &Tensor) -> Result<Var> {
        if mask.shape() != self.shape() {
            return Err(Error::shape("mul_const", self.shape(), mask.shape()));
        }
        let data = self
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a * m)
            .collect();
        let value = Tensor::from_parts(self.shape().to_vec(), data);
        let mask = mask.clone();
        Var::from_op("mul_const", value, vec![self.clone()], move |cx| {
            let g = cx
                .grad
                .data()
                .iter()
                .zip(mask.data())
                .map(|(g, m)| g * m)
                .collect();
            vec![Some(Tensor::from_parts(mask.shape().to_vec(), g))]
        })
    }

    pub fn scale(&self, k: f64) -> Result<Var> {
        let value = self.value().map(|v| v * k);
        Var::from_op("scale", value, vec![self.clone()], move |cx| {
            vec![Some(cx.grad.map(|g| g * k))]
        })
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var> {
        let value = self.value().map(|v| v + k);
        Var::from_op("add_scalar", value, vec![self.clone()], |cx| {
            vec![Some(cx.grad.clone())]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Var::from_op("reshape", value, vec![self.clone()], |cx| {
            vec![Some(
                cx.grad.reshape(cx.parents[0].shape()).expect("same numel"),
            )]
        })
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Var> {
        self.permute(&[1, 0])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != shape.len() || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::invalid_shape(
                "permute",
                shape,
                format!("bad permutation {perm:?}"),
            ));
        }
        let value = permute_tensor(self.value(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Var::from_op("permute", value, vec![self.clone()], move |cx| {
            vec![Some(permute_tensor(cx.grad, &inverse))]
        })
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid_shape(
                "narrow",
                &shape,
                format!("axis {axis} range {start}..{}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        Var::from_op("narrow", value, vec![self.clone()], move |cx| {
            let mut g = vec![0.0; outer * n * inner];
            let gd = cx.grad.data();
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                g[base..base + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), g))]
        })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid_shape(
                "concat",
                &base,
                format!("axis {axis}"),
            ));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &n) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        Var::from_op("concat", value, parts.to_vec(), move |cx| {
            let gd = cx.grad.data();
            let mut offset = 0;
            cx.parents
                .iter()
                .zip(&extents)
                .map(|(p, &n)| {
                    let start = offset;
                    offset += n;
                    p.requires_grad().then(|| {
                        let mut g = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let b = o * total * inner + start * inner;
                            g.extend_from_slice(&gd[b..b + n * inner]);
                        }
                        Tensor::from_parts(p.shape().to_vec(), g)
                    })
                })
                .collect()
        })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        let value = Tensor::scalar(self.data().iter().sum());
        Var::from_op("sum", value, vec![self.clone()], |cx| {
            let g = cx.grad.data()[0];
            vec![Some(Tensor::full(cx.parents[0].shape(), g))]
        })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let n = t.numel();
    if rank == 0 {
        return t.clone();
    }
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        let last = rank - 1;
        loop {
            // Innermost axis as a tight loop.
            let s = strides[last];
            for k in 0..out_shape[last] {
                out.push(src[off + k * s]);
            }
            let mut ax = last;
            loop {
                if ax == 0 {
                    return Tensor::from_parts(out_shape, out);
                }
                ax -= 1;
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}
