//! Straight-line reference implementations used as oracles. Everything here
//! is plain loops over `Vec`s, written independently of the library ops.

#![allow(dead_code)]

use nextformer::frontend::ConvNextBlock;
use nextformer::nn::{LayerNorm, Linear, MultiHeadAttention, ParamStore};
use nextformer::ops::Padding;
use nextformer::{RandomSource, Tensor};

pub type M = Vec<Vec<f64>>;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut RandomSource::new(seed))
}

/// Overwrite every parameter with `N(0, scale²)` draws.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = RandomSource::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.entries()[id.index()].shape.clone();
        store
            .set(id, Tensor::randn(&shape, scale, &mut rng))
            .unwrap();
    }
}

pub fn mat(t: &Tensor) -> M {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &M, b: &Tensor) -> f64 {
    assert_eq!([a.len(), a[0].len()], b.shape());
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn linear(x: &M, w: &Tensor, b: Option<&Tensor>) -> M {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..din {
                        s += row[i] * w.at(&[i, o]);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn linear_p(store: &ParamStore, l: &Linear, x: &M) -> M {
    linear(
        x,
        store.get(l.w).unwrap(),
        l.b.map(|b| store.get(b).unwrap()),
    )
}

pub fn layer_norm(x: &M, gamma: &[f64], beta: &[f64], eps: f64) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn layer_norm_p(store: &ParamStore, ln: &LayerNorm, x: &M) -> M {
    layer_norm(
        x,
        store.get(ln.gamma).unwrap().data(),
        store.get(ln.beta).unwrap().data(),
        ln.eps,
    )
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn map(x: &M, f: impl Fn(f64) -> f64) -> M {
    x.iter()
        .map(|r| r.iter().map(|&v| f(v)).collect())
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn scale(a: &M, k: f64) -> M {
    map(a, |v| v * k)
}

/// Rows of a softmax restricted to `visible`.
pub fn masked_softmax_row(scores: &[f64], visible: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .zip(visible)
        .map(|(s, &v)| if v { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn sinusoid(pos: i64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let freq = (-((2 * (j / 2)) as f64) * 10000f64.ln() / d as f64).exp();
            let a = pos as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Multi-head attention of queries `xq` over `xkv`, where `visible(i, j)`
/// says query `i` may see key `j`. Relative mode scores
/// `((q + u)·k_j + (q + v)·p_{i-j}) / sqrt(dh)`.
pub fn attention(
    store: &ParamStore,
    mha: &MultiHeadAttention,
    xq: &M,
    xkv: &M,
    visible: &dyn Fn(usize, usize) -> bool,
) -> M {
    let (d, h) = (mha.d, mha.heads);
    let dh = d / h;
    let q = linear_p(store, &mha.q, xq);
    let k = linear_p(store, &mha.k, xkv);
    let v = linear_p(store, &mha.v, xkv);
    let (nq, nk) = (xq.len(), xkv.len());
    let mut cat = vec![vec![0.0; d]; nq];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..nq {
            let mut scores = vec![0.0; nk];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                match (&mha.pos, mha.bias_u, mha.bias_v) {
                    (Some(pos), Some(u), Some(bv)) => {
                        let u = store.get(u).unwrap();
                        let bv = store.get(bv).unwrap();
                        let p = linear_p(store, pos, &vec![sinusoid(i as i64 - j as i64, d)]);
                        for (c, col) in cols.clone().enumerate() {
                            acc += (q[i][col] + u.at(&[head, c])) * k[j][col];
                            acc += (q[i][col] + bv.at(&[head, c])) * p[0][col];
                        }
                    }
                    _ => {
                        for col in cols.clone() {
                            acc += q[i][col] * k[j][col];
                        }
                    }
                }
                *s = acc / (dh as f64).sqrt();
            }
            let visible: Vec<bool> = (0..nk).map(|j| visible(i, j)).collect();
            let a = masked_softmax_row(&scores, &visible);
            for col in cols.clone() {
                cat[i][col] = (0..nk).map(|j| a[j] * v[j][col]).sum();
            }
        }
    }
    linear_p(store, &mha.o, &cat)
}

fn left_pad(k: usize, mode: Padding, time: bool) -> usize {
    match (mode, time) {
        (Padding::Same, _)
        | (Padding::CausalTimeSameFreq, false)
        | (Padding::ValidTimeSameFreq, false) => (k - 1) / 2,
        (Padding::CausalTimeSameFreq, true) => k - 1,
        _ => 0,
    }
}

fn out_len(n: usize, k: usize, s: usize, mode: Padding, time: bool) -> usize {
    let valid =
        matches!(mode, Padding::Valid) || (matches!(mode, Padding::ValidTimeSameFreq) && time);
    if valid {
        (n - k) / s + 1
    } else {
        n.div_ceil(s)
    }
}

/// Cross-correlation of `x [Cin × T × F]` with `w [Cout × Cin × kt × kf]`
/// (or `[C × kt × kf]` when `depthwise`), zero padded.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    kernel: (usize, usize),
    stride: (usize, usize),
    mode: Padding,
    depthwise: bool,
) -> Tensor {
    let [cin, t, f] = *x.shape() else {
        panic!("rank")
    };
    let cout = w.shape()[0];
    let (kt, kf) = kernel;
    let (to, fo) = (
        out_len(t, kt, stride.0, mode, true),
        out_len(f, kf, stride.1, mode, false),
    );
    let (lt, lf) = (left_pad(kt, mode, true), left_pad(kf, mode, false));
    let mut out = vec![0.0; cout * to * fo];
    for o in 0..cout {
        for ot in 0..to {
            for of in 0..fo {
                let mut s = b.map_or(0.0, |b| b.data()[o]);
                let inputs: Vec<usize> = if depthwise {
                    vec![o]
                } else {
                    (0..cin).collect()
                };
                for (ci_idx, &ci) in inputs.iter().enumerate() {
                    for a in 0..kt {
                        for c in 0..kf {
                            let it = (ot * stride.0 + a) as i64 - lt as i64;
                            let jf = (of * stride.1 + c) as i64 - lf as i64;
                            if it < 0 || jf < 0 || it >= t as i64 || jf >= f as i64 {
                                continue;
                            }
                            let wv = if depthwise {
                                w.at(&[o, a, c])
                            } else {
                                w.at(&[o, ci_idx, a, c])
                            };
                            s += wv * x.at(&[ci, it as usize, jf as usize]);
                        }
                    }
                }
                out[(o * to + ot) * fo + of] = s;
            }
        }
    }
    Tensor::new(&[cout, to, fo], out).unwrap()
}

/// One ConvNeXt block in eval mode on `[C × T × F]`.
pub fn convnext_oracle(
    store: &ParamStore,
    blk: &ConvNextBlock,
    x: &Tensor,
    drop_path: f64,
) -> Tensor {
    let [c, t, f] = *x.shape() else { panic!() };
    let k = blk.dw.spec.kernel;
    let w = store.get(blk.dw.w).unwrap();
    let h = conv2d(
        x,
        w,
        blk.dw.b.map(|b| store.get(b).unwrap()),
        k,
        (1, 1),
        Padding::Same,
        true,
    );
    // Channels-last rows, one per (t, f) position.
    let rows: M = (0..t * f)
        .map(|pos| (0..c).map(|ch| h.data()[ch * t * f + pos]).collect())
        .collect();
    let z = layer_norm_p(store, &blk.norm, &rows);
    let z = map(&linear_p(store, &blk.pw1, &z), gelu);
    let z = linear_p(store, &blk.pw2, &z);
    let gamma = store.get(blk.gamma).unwrap().data();
    Tensor::from_fn(x.shape(), |i| {
        let (ch, pos) = (i / (t * f), i % (t * f));
        x.data()[i] + (1.0 - drop_path) * gamma[ch] * z[pos][ch]
    })
}
