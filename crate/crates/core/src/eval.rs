//! Held-out perplexity and teacher-forced KL between two models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HybridLM;
use crate::scalar::Scalar;
use crate::tensor::log_softmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub ppl: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    /// NLL of every predicted token, in corpus order.
    pub nll: Vec<f64>,
}

/// Segments of at most `seq_len + 1` tokens overlapping by one, so every
/// token after the first is predicted exactly once.
pub fn eval_segments(tokens: &[usize], seq_len: usize) -> Vec<&[usize]> {
    let seq_len = seq_len.max(1);
    let mut out = Vec::new();
    let mut s = 0;
    while s + 1 < tokens.len() {
        let e = (s + seq_len + 1).min(tokens.len());
        out.push(&tokens[s..e]);
        s = e - 1;
    }
    out
}

pub fn eval_ppl<T: Scalar>(model: &HybridLM<T>, tokens: &[usize], seq_len: usize) -> Result<PplReport> {
    if tokens.len() < 2 {
        return Err(Error::EmptySplit);
    }
    let v = model.spec.vocab;
    let mut nll = Vec::with_capacity(tokens.len() - 1);
    let mut lp = vec![0.0f64; v];
    for seg in eval_segments(tokens, seq_len) {
        let logits = model.logits(&seg[..seg.len() - 1])?;
        for (r, &target) in seg[1..].iter().enumerate() {
            let row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
            log_softmax(&row, &mut lp);
            nll.push(-lp[target]);
        }
    }
    let mean_nll = nll.iter().sum::<f64>() / nll.len() as f64;
    Ok(PplReport {
        ppl: mean_nll.exp(),
        mean_nll,
        tokens: nll.len(),
        nll,
    })
}

/// Student perplexity over teacher perplexity on the same tokens.
pub fn ppl_ratio<S: Scalar, T: Scalar>(student: &HybridLM<S>, teacher: &HybridLM<T>, tokens: &[usize], seq_len: usize) -> Result<f64> {
    Ok(eval_ppl(student, tokens, seq_len)?.ppl / eval_ppl(teacher, tokens, seq_len)?.ppl)
}

/// `KL(p‖q)` from log-probabilities.
pub fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(&a, &b)| if a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum()
}

/// Mean over every position of every sequence of `KL(teacher ‖ student)`
/// for the next-token distributions.
pub fn mean_kl<S: Scalar, T: Scalar>(teacher: &HybridLM<T>, student: &HybridLM<S>, sequences: &[Vec<usize>]) -> Result<f64> {
    let v = teacher.spec.vocab;
    let (mut lp, mut lq) = (vec![0.0; v], vec![0.0; v]);
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences.iter().filter(|s| !s.is_empty()) {
        let tl = teacher.logits(seq)?;
        let sl = student.logits(seq)?;
        for r in 0..seq.len() {
            let a: Vec<f64> = tl.row(r).iter().map(|x| x.as_f64()).collect();
            let b: Vec<f64> = sl.row(r).iter().map(|x| x.as_f64()).collect();
            log_softmax(&a, &mut lp);
            log_softmax(&b, &mut lq);
            total += kl_from_log_probs(&lp, &lq);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySplit);
    }
    Ok(total / count as f64)
}
