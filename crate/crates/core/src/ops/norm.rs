//! Layer normalization over the trailing axis.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Var {
    /// `(x - mean) / sqrt(var + eps) * gamma + beta`, statistics over the
    /// last axis (biased variance).
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let shape = self.shape().to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid_shape("layer_norm", &shape, "scalar input"))?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::shape("layer_norm", &shape, gamma.shape()));
        }
        let rows = if n == 0 { 0 } else { self.value().numel() / n };
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gm[j] + bt[j];
            }
        }
        let value = Tensor::from_parts(shape.clone(), out);
        Var::from_op(
            "layer_norm",
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |cx| {
                let g = cx.grad.data();
                let gm = cx.parents[1].data();
                let mut dx = vec![0.0; rows * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let h = &xhat[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gm[j];
                        m1 += dh;
                        m2 += dh * h[j];
                        dg[j] += gr[j] * h[j];
                        db[j] += gr[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv_std[r] * (gr[j] * gm[j] - m1 - h[j] * m2);
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(vec![n], dg)),
                    Some(Tensor::from_parts(vec![n], db)),
                ]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn affine(n: usize) -> (Var, Var) {
        (
            Var::constant(Tensor::ones(&[n])),
            Var::constant(Tensor::zeros(&[n])),
        )
    }

    #[test]
    fn constant_rows_map_to_zero() {
        let (g, b) = affine(4);
        let y = Var::constant(Tensor::full(&[2, 4], 3.5))
            .layer_norm(&g, &b, 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standardized_input_is_unchanged() {
        let (g, b) = affine(2);
        let x = Var::constant(Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let y = x.layer_norm(&g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-10 && (y.data()[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn random_rows_are_standardized() {
        let mut rng = RandomSource::new(9);
        let (g, b) = affine(8);
        let x = Var::constant(Tensor::randn(&[3, 8], 4.0, &mut rng).map(|v| v + 2.0));
        let y = x.layer_norm(&g, &b, 0.0).unwrap();
        for r in 0..3 {
            let row = y.value().row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }
}
