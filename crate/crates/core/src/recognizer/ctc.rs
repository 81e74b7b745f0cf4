//! Connectionist temporal classification over probability rows.

use mrn_autograd::{AutogradError, CustomOp, Graph, Tensor, Var};

use super::charset::BLANK;
use crate::error::{MrnError, Result};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn adjacent_repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `frames ≥ |labels| + repeats`, the minimum path length.
pub fn check_feasible(frames: usize, labels: &[usize]) -> Result<()> {
    let repeats = adjacent_repeats(labels);
    if labels.is_empty() || frames < labels.len() + repeats {
        return Err(MrnError::InfeasibleTarget {
            frames,
            labels: labels.len(),
            repeats,
        });
    }
    Ok(())
}

/// Negative log-likelihood of `labels` under the `frames × classes` row-major
/// probability matrix `probs`, and its gradient with respect to `probs`.
pub fn ctc_loss_and_grad(probs: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || probs.len() % classes != 0 {
        return Err(crate::error::contract("ctc: probability buffer is not a matrix"));
    }
    let frames = probs.len() / classes;
    check_feasible(frames, labels)?;
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(crate::error::contract(format!("ctc: label {bad} outside 1..{classes}")));
    }
    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { BLANK } else { labels[s / 2] }).collect();
    let skip: Vec<bool> = (0..s_len).map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]).collect();
    let ly = |t: usize, s: usize| probs[t * classes + ext[s]].ln();
    let ninf = f64::NEG_INFINITY;

    // pre[t][s]: log mass reaching state s at t before emitting y_t.
    let mut pre = vec![ninf; frames * s_len];
    let mut alpha = vec![ninf; frames * s_len];
    pre[0] = 0.0;
    pre[1] = 0.0;
    for s in 0..2 {
        alpha[s] = ly(0, s);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut v = prev[s];
            if s >= 1 {
                v = lse2(v, prev[s - 1]);
            }
            if skip[s] {
                v = lse2(v, prev[s - 2]);
            }
            pre[t * s_len + s] = v;
            alpha[t * s_len + s] = if v == ninf { ninf } else { v + ly(t, s) };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = lse2(last[s_len - 1], last[s_len - 2]);
    if !log_p.is_finite() {
        return Err(AutogradError::NonFinite { op: "ctc" }.into());
    }

    // beta[t][s]: log mass of completing from state s at t, emissions after t.
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + ly(t + 1, s2);
            let mut v = next(s);
            if s + 1 < s_len {
                v = lse2(v, next(s + 1));
            }
            if s + 2 < s_len && skip[s + 2] {
                v = lse2(v, next(s + 2));
            }
            beta[t * s_len + s] = v;
        }
    }

    let mut grad = vec![0.0; probs.len()];
    for t in 0..frames {
        for s in 0..s_len {
            let v = pre[t * s_len + s] + beta[t * s_len + s];
            if v != ninf {
                grad[t * classes + ext[s]] -= (v - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

#[derive(Debug)]
struct CtcBatch {
    grad: Vec<f64>,
    shape: Vec<usize>,
}

impl CustomOp for CtcBatch {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(
        &self,
        grad_output: &Tensor,
        _inputs: &[&Tensor],
        _output: &Tensor,
    ) -> mrn_autograd::Result<Vec<Option<Tensor>>> {
        let g = grad_output.item();
        let data = self.grad.iter().map(|v| v * g).collect();
        Ok(vec![Some(Tensor::new(self.shape.clone(), data)?)])
    }
}

/// Batched CTC loss node.
#[derive(Debug)]
pub struct CtcOutcome {
    /// Mean loss over feasible samples; `None` when every sample was skipped.
    pub loss: Option<Var>,
    pub skipped: usize,
}

/// Mean CTC loss over a `(batch·frames) × classes` probability node. Samples
/// whose target cannot fit in `frames` are skipped and counted.
pub fn ctc_batch(g: &mut Graph, probs: Var, frames: usize, labels: &[Vec<usize>]) -> Result<CtcOutcome> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != frames * labels.len() {
        return Err(crate::error::contract(format!(
            "ctc_batch: probabilities of shape {shape:?} do not hold {} samples of {frames} frames",
            labels.len()
        )));
    }
    let classes = shape[1];
    let block = frames * classes;
    let mut grad = vec![0.0; shape[0] * classes];
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (b, l) in labels.iter().enumerate() {
        if check_feasible(frames, l).is_err() {
            skipped += 1;
            continue;
        }
        let rows = &g.value(probs).data()[b * block..(b + 1) * block];
        let (loss, gr) = ctc_loss_and_grad(rows, classes, l)?;
        total += loss;
        grad[b * block..(b + 1) * block].copy_from_slice(&gr);
        used += 1;
    }
    if used == 0 {
        return Ok(CtcOutcome { loss: None, skipped });
    }
    let inv = 1.0 / used as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    let out = Tensor::scalar(total * inv);
    let loss = g.custom(Box::new(CtcBatch { grad, shape }), &[probs], out)?;
    Ok(CtcOutcome {
        loss: Some(loss),
        skipped,
    })
}

/// Per-frame argmax (lowest index on ties), repeats collapsed, blanks dropped.
pub fn ctc_greedy_decode(probs: &[f64], classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in probs.chunks(classes) {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
