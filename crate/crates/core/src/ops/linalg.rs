//! Matrix products. The kernel is `matrixmultiply::dgemm`; each output
//! element is accumulated over the inner dimension in a fixed order that does
//! not depend on the number of rows or columns, which the streaming and
//! causality checks rely on.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a) · op(b)` where `op` optionally transposes; `a` is stored
/// row-major as `[m×k]` (or `[k×m]` when `ta`), `b` as `[k×n]` (or `[n×k]`).
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked by the callers' shape validation and
    // the strides above address exactly m×k, k×n and m×n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn dims2(op: &'static str, v: &Var) -> Result<(usize, usize)> {
    match v.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid_shape(op, s, "expected a matrix")),
    }
}

impl Var {
    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", rhs)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let value = Tensor::from_parts(
            vec![m, n],
            gemm(m, k, n, self.data(), false, rhs.data(), false),
        );
        Var::from_op(
            "matmul",
            value,
            vec![self.clone(), rhs.clone()],
            move |cx| {
                let (a, b) = (&cx.parents[0], &cx.parents[1]);
                let g = cx.grad.data();
                let ga = a.requires_grad().then(|| {
                    Tensor::from_parts(vec![m, k], gemm(m, n, k, g, false, b.data(), true))
                });
                let gb = b.requires_grad().then(|| {
                    Tensor::from_parts(vec![k, n], gemm(k, m, n, a.data(), true, g, false))
                });
                vec![ga, gb]
            },
        )
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`.
    pub fn matmul_t(&self, rhs: &Var) -> Result<Var> {
        let (m, k) = dims2("matmul_t", self)?;
        let (n, k2) = dims2("matmul_t", rhs)?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(), rhs.shape()));
        }
        let value = Tensor::from_parts(
            vec![m, n],
            gemm(m, k, n, self.data(), false, rhs.data(), true),
        );
        Var::from_op(
            "matmul_t",
            value,
            vec![self.clone(), rhs.clone()],
            move |cx| {
                let (a, b) = (&cx.parents[0], &cx.parents[1]);
                let g = cx.grad.data();
                let ga = a.requires_grad().then(|| {
                    Tensor::from_parts(vec![m, k], gemm(m, n, k, g, false, b.data(), false))
                });
                let gb = b.requires_grad().then(|| {
                    Tensor::from_parts(vec![n, k], gemm(n, m, k, g, true, a.data(), false))
                });
                vec![ga, gb]
            },
        )
    }
}
