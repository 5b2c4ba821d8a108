//! CTC loss over per-frame log-probabilities, blank id 0, and greedy decoding.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Frames needed to emit `labels`: one per label plus a blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + repeats(labels)
}

fn repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn check_labels(labels: &[usize], vocab: usize) -> Result<()> {
    match labels.iter().find(|&&l| l == BLANK || l >= vocab) {
        Some(&label) => Err(Error::InvalidLabel { label, vocab }),
        None => Ok(()),
    }
}

/// Result of the forward-backward pass.
#[derive(Clone, Debug)]
pub struct CtcResult {
    /// `-log P(labels | log_probs)`; `+inf` when infeasible.
    pub loss: f64,
    pub feasible: bool,
    /// Gradient of `loss` with respect to `log_probs`, `[M × V]`; zero when
    /// infeasible.
    pub grad: Tensor,
}

/// Forward-backward in log space over the blank-interleaved label sequence.
pub fn ctc_forward_backward(log_probs: &Tensor, labels: &[usize]) -> Result<CtcResult> {
    let [m, v] = *log_probs.shape() else {
        return Err(Error::invalid_shape(
            "ctc",
            log_probs.shape(),
            "expected [M, V]",
        ));
    };
    check_labels(labels, v)?;
    let s = 2 * labels.len() + 1;
    let sym = |i: usize| {
        if i.is_multiple_of(2) {
            BLANK
        } else {
            labels[i / 2]
        }
    };
    if m < min_frames(labels) || m == 0 {
        return Ok(CtcResult {
            loss: f64::INFINITY,
            feasible: false,
            grad: Tensor::zeros(&[m, v]),
        });
    }
    let lp = log_probs.data();
    let at = |t: usize, i: usize| lp[t * v + sym(i)];
    // Skipping a blank is allowed unless it separates two equal labels.
    let can_skip = |i: usize| i >= 2 && i % 2 == 1 && sym(i) != sym(i - 2);

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; m * s];
    alpha[0] = at(0, 0);
    if s > 1 {
        alpha[1] = at(0, 1);
    }
    for t in 1..m {
        for i in 0..s {
            let mut a = alpha[(t - 1) * s + i];
            if i >= 1 {
                a = log_add(a, alpha[(t - 1) * s + i - 1]);
            }
            if can_skip(i) {
                a = log_add(a, alpha[(t - 1) * s + i - 2]);
            }
            if a != ninf {
                alpha[t * s + i] = a + at(t, i);
            }
        }
    }
    let last = (m - 1) * s;
    let log_p = if s > 1 {
        log_add(alpha[last + s - 1], alpha[last + s - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![ninf; m * s];
    beta[last + s - 1] = at(m - 1, s - 1);
    if s > 1 {
        beta[last + s - 2] = at(m - 1, s - 2);
    }
    for t in (0..m - 1).rev() {
        for i in 0..s {
            let mut b = beta[(t + 1) * s + i];
            if i + 1 < s {
                b = log_add(b, beta[(t + 1) * s + i + 1]);
            }
            if i + 2 < s && can_skip(i + 2) {
                b = log_add(b, beta[(t + 1) * s + i + 2]);
            }
            if b != ninf {
                beta[t * s + i] = b + at(t, i);
            }
        }
    }

    // alpha and beta both include frame t's emission, so the posterior of
    // state i at t is exp(alpha + beta - lp - log_p).
    let mut grad = vec![0.0; m * v];
    for t in 0..m {
        for i in 0..s {
            let ab = alpha[t * s + i] + beta[t * s + i];
            if ab != ninf {
                grad[t * v + sym(i)] -= (ab - at(t, i) - log_p).exp();
            }
        }
    }
    Ok(CtcResult {
        loss: -log_p,
        feasible: log_p.is_finite(),
        grad: Tensor::new(&[m, v], grad)?,
    })
}

impl Var {
    /// CTC loss of `[M × V]` log-probabilities; infeasible pairs are an error.
    pub fn ctc_loss(&self, labels: &[usize]) -> Result<Var> {
        let r = ctc_forward_backward(self.value(), labels)?;
        if !r.feasible {
            return Err(Error::CtcInfeasible {
                frames: self.shape()[0],
                labels: labels.len(),
                repeats: repeats(labels),
            });
        }
        let grad = r.grad;
        Var::from_op(
            "ctc_loss",
            Tensor::scalar(r.loss),
            vec![self.clone()],
            move |cx| {
                let g = cx.grad.item().unwrap_or(0.0);
                vec![Some(grad.map(|x| x * g))]
            },
        )
    }
}

/// Frame-wise argmax (lowest id on ties), collapse repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let v = log_probs.shape().last().copied().unwrap_or(0);
    if v == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.data().chunks(v) {
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &x)| if x > row[b] { i } else { b });
        if prev != Some(best) && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
