//! 2-D convolution over `[channels × time × freq]` inputs, dense or depthwise.
//!
//! Dense convolution lowers to `im2col` plus one matrix product per block of
//! output rows; depthwise convolution is a direct loop. In both, an output
//! element accumulates its taps in a fixed order, so values never depend on
//! how many frames were presented at once.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// `ceil(n / s)` outputs on both axes, left pad `(k - 1) / 2`.
    Same,
    /// Time axis padded only in the past (`k_t - 1` frames); frequency as `Same`.
    CausalTimeSameFreq,
    /// No padding.
    Valid,
    /// No time padding, frequency as `Same`. Used when the past context is
    /// supplied explicitly from a streaming cache.
    ValidTimeSameFreq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// `(k_t, k_f)`.
    pub kernel: (usize, usize),
    /// `(s_t, s_f)`.
    pub stride: (usize, usize),
    /// `(in, out)`.
    pub channels: (usize, usize),
    pub padding: Padding,
    pub depthwise: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum AxisPad {
    Same,
    Causal,
    Valid,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), channels: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            channels,
            padding: Padding::Same,
            depthwise: false,
        }
    }

    pub fn depthwise(kernel: (usize, usize), channels: usize) -> Self {
        Self {
            depthwise: true,
            ..Self::new(kernel, (1, 1), (channels, channels))
        }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kt, kf) = self.kernel;
        let (st, sf) = self.stride;
        if kt == 0 || kf == 0 || st == 0 || sf == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {:?} and stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        if self.depthwise && self.channels.0 != self.channels.1 {
            return Err(Error::InvalidArgument(format!(
                "depthwise conv needs in == out, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Shape of the weight tensor.
    pub fn weight_shape(&self) -> Vec<usize> {
        let (kt, kf) = self.kernel;
        if self.depthwise {
            vec![self.channels.1, kt, kf]
        } else {
            vec![self.channels.1, self.channels.0, kt, kf]
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    fn axis_modes(&self) -> (AxisPad, AxisPad) {
        match self.padding {
            Padding::Same => (AxisPad::Same, AxisPad::Same),
            Padding::CausalTimeSameFreq => (AxisPad::Causal, AxisPad::Same),
            Padding::Valid => (AxisPad::Valid, AxisPad::Valid),
            Padding::ValidTimeSameFreq => (AxisPad::Valid, AxisPad::Same),
        }
    }

    /// Output `(T', F')` for an input of `(t, f)` frames/bins.
    pub fn output_extent(&self, t: usize, f: usize) -> Result<(usize, usize)> {
        let g = self.geometry(t, f)?;
        Ok((g.to, g.fo))
    }

    fn geometry(&self, t: usize, f: usize) -> Result<Geometry> {
        self.validate()?;
        let (mt, mf) = self.axis_modes();
        let (to, lt) = axis_plan(t, self.kernel.0, self.stride.0, mt)
            .ok_or_else(|| Error::invalid_shape("conv2d", &[t, f], "time extent too short"))?;
        let (fo, lf) = axis_plan(f, self.kernel.1, self.stride.1, mf)
            .ok_or_else(|| Error::invalid_shape("conv2d", &[t, f], "freq extent too short"))?;
        Ok(Geometry {
            cin: self.channels.0,
            cout: self.channels.1,
            t,
            f,
            kt: self.kernel.0,
            kf: self.kernel.1,
            st: self.stride.0,
            sf: self.stride.1,
            to,
            fo,
            lt,
            lf,
        })
    }
}

/// `(output length, left pad)`; `None` when the input is too short.
fn axis_plan(n: usize, k: usize, s: usize, mode: AxisPad) -> Option<(usize, usize)> {
    if n == 0 {
        return None;
    }
    match mode {
        AxisPad::Same => Some((n.div_ceil(s), (k - 1) / 2)),
        AxisPad::Causal => Some((n.div_ceil(s), k - 1)),
        AxisPad::Valid => (n >= k).then(|| ((n - k) / s + 1, 0)),
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    t: usize,
    f: usize,
    kt: usize,
    kf: usize,
    st: usize,
    sf: usize,
    to: usize,
    fo: usize,
    lt: usize,
    lf: usize,
}

impl Geometry {
    /// Input index along an axis, or `None` when it falls in the padding.
    #[inline]
    fn src(o: usize, s: usize, tap: usize, left: usize, n: usize) -> Option<usize> {
        let p = o * s + tap;
        (p >= left && p - left < n).then(|| p - left)
    }

    fn taps(&self) -> usize {
        self.cin * self.kt * self.kf
    }

    /// Output time rows per lowering block, bounding the `im2col` buffer.
    fn rows_per_block(&self) -> usize {
        const BUDGET: usize = 1 << 22;
        (BUDGET / (self.taps() * self.fo).max(1)).clamp(1, self.to)
    }

    /// Lower output rows `[r0, r1)` to a `[taps × positions]` column matrix.
    fn im2col(&self, x: &[f64], r0: usize, r1: usize) -> Vec<f64> {
        let npos = (r1 - r0) * self.fo;
        let mut cols = vec![0.0; self.taps() * npos];
        for c in 0..self.cin {
            for i in 0..self.kt {
                for j in 0..self.kf {
                    let row = ((c * self.kt + i) * self.kf + j) * npos;
                    for to in r0..r1 {
                        let Some(ti) = Self::src(to, self.st, i, self.lt, self.t) else {
                            continue;
                        };
                        let xrow = &x[(c * self.t + ti) * self.f..];
                        let base = row + (to - r0) * self.fo;
                        for fo in 0..self.fo {
                            if let Some(fi) = Self::src(fo, self.sf, j, self.lf, self.f) {
                                cols[base + fo] = xrow[fi];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        let npos = (r1 - r0) * self.fo;
        for c in 0..self.cin {
            for i in 0..self.kt {
                for j in 0..self.kf {
                    let row = ((c * self.kt + i) * self.kf + j) * npos;
                    for to in r0..r1 {
                        let Some(ti) = Self::src(to, self.st, i, self.lt, self.t) else {
                            continue;
                        };
                        let base = row + (to - r0) * self.fo;
                        let xrow = (c * self.t + ti) * self.f;
                        for fo in 0..self.fo {
                            if let Some(fi) = Self::src(fo, self.sf, j, self.lf, self.f) {
                                dx[xrow + fi] += cols[base + fo];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dense_forward(g: &Geometry, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let plane = g.to * g.fo;
    let mut out = vec![0.0; g.cout * plane];
    let rb = g.rows_per_block();
    let mut r0 = 0;
    while r0 < g.to {
        let r1 = (r0 + rb).min(g.to);
        let npos = (r1 - r0) * g.fo;
        let cols = g.im2col(x, r0, r1);
        let y = gemm(g.cout, g.taps(), npos, w, false, &cols, false);
        for co in 0..g.cout {
            let dst = &mut out[co * plane + r0 * g.fo..co * plane + r1 * g.fo];
            dst.copy_from_slice(&y[co * npos..(co + 1) * npos]);
        }
        r0 = r1;
    }
    if let Some(b) = b {
        for (co, chunk) in out.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

fn dense_backward(
    g: &Geometry,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.to * g.fo;
    let mut dx = want_x.then(|| vec![0.0; g.cin * g.t * g.f]);
    let mut dw = want_w.then(|| vec![0.0; g.cout * g.taps()]);
    let rb = g.rows_per_block();
    let mut r0 = 0;
    while r0 < g.to {
        let r1 = (r0 + rb).min(g.to);
        let npos = (r1 - r0) * g.fo;
        let mut gblk = Vec::with_capacity(g.cout * npos);
        for co in 0..g.cout {
            gblk.extend_from_slice(&gy[co * plane + r0 * g.fo..co * plane + r1 * g.fo]);
        }
        if let Some(dw) = dw.as_mut() {
            let cols = g.im2col(x, r0, r1);
            let part = gemm(g.cout, npos, g.taps(), &gblk, false, &cols, true);
            dw.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = gemm(g.taps(), g.cout, npos, w, true, &gblk, false);
            g.col2im(&dcols, r0, r1, dx);
        }
        r0 = r1;
    }
    (dx, dw)
}

fn depthwise_forward(g: &Geometry, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let plane = g.to * g.fo;
    let mut out = vec![0.0; g.cout * plane];
    for c in 0..g.cout {
        let xc = &x[c * g.t * g.f..(c + 1) * g.t * g.f];
        let oc = &mut out[c * plane..(c + 1) * plane];
        for i in 0..g.kt {
            for to in 0..g.to {
                let Some(ti) = Geometry::src(to, g.st, i, g.lt, g.t) else {
                    continue;
                };
                let xrow = &xc[ti * g.f..(ti + 1) * g.f];
                let orow = &mut oc[to * g.fo..(to + 1) * g.fo];
                for j in 0..g.kf {
                    let wv = w[(c * g.kt + i) * g.kf + j];
                    for (fo, o) in orow.iter_mut().enumerate() {
                        if let Some(fi) = Geometry::src(fo, g.sf, j, g.lf, g.f) {
                            *o += wv * xrow[fi];
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            oc.iter_mut().for_each(|v| *v += b[c]);
        }
    }
    out
}

fn depthwise_backward(g: &Geometry, x: &[f64], w: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let plane = g.to * g.fo;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for c in 0..g.cout {
        for i in 0..g.kt {
            for to in 0..g.to {
                let Some(ti) = Geometry::src(to, g.st, i, g.lt, g.t) else {
                    continue;
                };
                for j in 0..g.kf {
                    let widx = (c * g.kt + i) * g.kf + j;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for fo in 0..g.fo {
                        if let Some(fi) = Geometry::src(fo, g.sf, j, g.lf, g.f) {
                            let go = gy[c * plane + to * g.fo + fo];
                            let xi = (c * g.t + ti) * g.f + fi;
                            acc += go * x[xi];
                            dx[xi] += go * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw)
}

fn bias_grad(gy: &[f64], cout: usize) -> Tensor {
    let plane = gy.len() / cout.max(1);
    Tensor::from_fn(&[cout], |c| gy[c * plane..(c + 1) * plane].iter().sum())
}

impl Var {
    /// Convolve a `[C_in × T × F]` input. The weight is `[C_out × C_in × k_t × k_f]`
    /// (dense) or `[C × k_t × k_f]` (depthwise); the bias, if any, is `[C_out]`.
    pub fn conv2d(&self, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
        let [cin, t, f] = *self.shape() else {
            return Err(Error::invalid_shape(
                "conv2d",
                self.shape(),
                "expected [C, T, F]",
            ));
        };
        if cin != spec.channels.0 {
            return Err(Error::shape("conv2d", self.shape(), &spec.weight_shape()));
        }
        if w.shape() != spec.weight_shape().as_slice() {
            return Err(Error::shape("conv2d", w.shape(), &spec.weight_shape()));
        }
        if let Some(b) = b {
            if b.shape() != [spec.channels.1] {
                return Err(Error::shape("conv2d", b.shape(), &[spec.channels.1]));
            }
        }
        let g = spec.geometry(t, f)?;
        let out = if spec.depthwise {
            depthwise_forward(&g, self.data(), w.data(), b.map(Var::data))
        } else {
            dense_forward(&g, self.data(), w.data(), b.map(Var::data))
        };
        let value = Tensor::from_parts(vec![g.cout, g.to, g.fo], out);
        let depthwise = spec.depthwise;
        let mut parents = vec![self.clone(), w.clone()];
        parents.extend(b.cloned());
        Var::from_op("conv2d", value, parents, move |cx| {
            let (x, w) = (&cx.parents[0], &cx.parents[1]);
            let gy = cx.grad.data();
            let (dx, dw) = if depthwise {
                let (dx, dw) = depthwise_backward(&g, x.data(), w.data(), gy);
                (Some(dx), Some(dw))
            } else {
                dense_backward(
                    &g,
                    x.data(),
                    w.data(),
                    gy,
                    x.requires_grad(),
                    w.requires_grad(),
                )
            };
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            ];
            if cx.parents.len() == 3 {
                grads.push(Some(bias_grad(gy, g.cout)));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    #[test]
    fn output_extents_follow_ceil_rule() {
        let s = ConvSpec::new((3, 3), (2, 2), (1, 4));
        assert_eq!(s.output_extent(1000, 80).unwrap(), (500, 40));
        assert_eq!(s.output_extent(7, 5).unwrap(), (4, 3));
        let v = s.with_padding(Padding::Valid);
        assert_eq!(v.output_extent(7, 5).unwrap(), (3, 2));
        assert!(v.output_extent(2, 5).is_err());
        assert!(s.output_extent(0, 5).is_err());
    }

    #[test]
    fn identity_kernel() {
        let mut rng = RandomSource::new(1);
        let x = Var::constant(Tensor::randn(&[1, 5, 4], 1.0, &mut rng));
        let w = Var::constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = x
            .conv2d(&w, None, &ConvSpec::new((1, 1), (1, 1), (1, 1)))
            .unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn averaging_a_constant_keeps_the_interior() {
        let x = Var::constant(Tensor::full(&[1, 6, 6], 7.0));
        let w = Var::constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = x
            .conv2d(&w, None, &ConvSpec::new((3, 3), (1, 1), (1, 1)))
            .unwrap();
        for t in 1..5 {
            for f in 1..5 {
                assert!((y.value().at(&[0, t, f]) - 7.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_delta_is_identity() {
        let mut rng = RandomSource::new(2);
        let x = Var::constant(Tensor::randn(&[3, 6, 5], 1.0, &mut rng));
        let mut w = Tensor::zeros(&[3, 7, 7]);
        for c in 0..3 {
            w.data_mut()[c * 49 + 3 * 7 + 3] = 1.0;
        }
        let y = x
            .conv2d(&Var::constant(w), None, &ConvSpec::depthwise((7, 7), 3))
            .unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn small_block_budget_matches_single_block() {
        // A tall input forces several lowering blocks.
        let mut rng = RandomSource::new(3);
        let spec = ConvSpec::new((3, 3), (1, 1), (64, 8));
        let x = Var::constant(Tensor::randn(&[64, 900, 12], 1.0, &mut rng));
        let w = Var::constant(Tensor::randn(&spec.weight_shape(), 0.1, &mut rng));
        let g = spec.geometry(900, 12).unwrap();
        assert!(g.rows_per_block() < 900);
        let y = x.conv2d(&w, None, &spec).unwrap();
        let head = x.narrow(1, 0, 40).unwrap().conv2d(&w, None, &spec).unwrap();
        for c in 0..8 {
            for t in 0..39 {
                for f in 0..12 {
                    assert_eq!(y.value().at(&[c, t, f]), head.value().at(&[c, t, f]));
                }
            }
        }
    }
}
