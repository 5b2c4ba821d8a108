//! Softmax family, including the masked row softmax used by attention.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::mask::Mask;
use crate::ops::basic::axis_split;
use crate::tensor::Tensor;

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid_shape(op, shape, format!("axis {axis}")));
    }
    Ok(())
}

/// Apply `f` to every 1-D lane along `axis`, given as a gathered buffer.
fn for_lanes(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut idx = vec![0; n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = (o * n + k) * inner + i;
            }
            f(&idx);
        }
    }
}

impl Var {
    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for_lanes(self.shape(), axis, |idx| {
            let m = idx.iter().fold(f64::NEG_INFINITY, |m, &i| m.max(x[i]));
            let mut s = 0.0;
            for &i in idx {
                let e = (x[i] - m).exp();
                out[i] = e;
                s += e;
            }
            for &i in idx {
                out[i] /= s;
            }
        });
        let shape = self.shape().to_vec();
        let value = Tensor::from_parts(shape.clone(), out);
        Var::from_op("softmax", value, vec![self.clone()], move |cx| {
            vec![Some(softmax_backward(
                &shape,
                axis,
                cx.out.data(),
                cx.grad.data(),
            ))]
        })
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Var> {
        check_axis("log_softmax", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for_lanes(self.shape(), axis, |idx| {
            let m = idx.iter().fold(f64::NEG_INFINITY, |m, &i| m.max(x[i]));
            let lse = m + idx.iter().map(|&i| (x[i] - m).exp()).sum::<f64>().ln();
            for &i in idx {
                out[i] = x[i] - lse;
            }
        });
        let shape = self.shape().to_vec();
        let value = Tensor::from_parts(shape.clone(), out);
        Var::from_op("log_softmax", value, vec![self.clone()], move |cx| {
            let y = cx.out.data();
            let g = cx.grad.data();
            let mut gx = vec![0.0; y.len()];
            for_lanes(&shape, axis, |idx| {
                let gs: f64 = idx.iter().map(|&i| g[i]).sum();
                for &i in idx {
                    gx[i] = g[i] - y[i].exp() * gs;
                }
            });
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Row softmax of a `[rows×cols]` score matrix where hidden entries get
    /// exactly zero weight. A row with no visible entry is an error.
    pub fn masked_softmax(&self, mask: &Mask) -> Result<Var> {
        let (rows, cols) = match self.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::invalid_shape(
                    "masked_softmax",
                    s,
                    "expected a matrix",
                ))
            }
        };
        if mask.rows() != rows || mask.cols() != cols {
            return Err(Error::shape(
                "masked_softmax",
                self.shape(),
                &[mask.rows(), mask.cols()],
            ));
        }
        let x = self.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let vis = mask.row(r);
            let m = row
                .iter()
                .zip(vis)
                .filter(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, |m, (&s, _)| m.max(s));
            if m == f64::NEG_INFINITY {
                return Err(Error::EmptyMaskRow { row: r });
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut s = 0.0;
            for j in 0..cols {
                if vis[j] {
                    let e = (row[j] - m).exp();
                    o[j] = e;
                    s += e;
                }
            }
            for v in o.iter_mut() {
                *v /= s;
            }
        }
        let shape = vec![rows, cols];
        let value = Tensor::from_parts(shape.clone(), out);
        Var::from_op("masked_softmax", value, vec![self.clone()], move |cx| {
            vec![Some(softmax_backward(
                &shape,
                1,
                cx.out.data(),
                cx.grad.data(),
            ))]
        })
    }
}

fn softmax_backward(shape: &[usize], axis: usize, y: &[f64], g: &[f64]) -> Tensor {
    let mut gx = vec![0.0; y.len()];
    for_lanes(shape, axis, |idx| {
        let dot: f64 = idx.iter().map(|&i| y[i] * g[i]).sum();
        for &i in idx {
            gx[i] = y[i] * (g[i] - dot);
        }
    });
    Tensor::from_parts(shape.to_vec(), gx)
}
