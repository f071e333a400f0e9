//! Connectionist temporal classification: log-space forward DP over the
//! blank-extended target, a brute-force path-enumeration oracle, and
//! greedy collapse decoding. Blank is index 0 throughout.

use crate::autodiff::Var;
use crate::error::{AkvsrError, Result};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Outcome of the CTC loss: a differentiable scalar, or a typed
/// infeasibility marker when `T < L + repeats(target)`.
pub enum CtcLoss {
    Loss(Var),
    Infeasible,
}

impl CtcLoss {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, CtcLoss::Infeasible)
    }

    pub fn value(&self) -> f64 {
        match self {
            CtcLoss::Loss(v) => v.value().scalar_value(),
            CtcLoss::Infeasible => f64::INFINITY,
        }
    }
}

fn validate_target(target: &[usize], vocab: usize) -> Result<()> {
    for &s in target {
        if s == BLANK {
            return Err(AkvsrError::Contract("CTC target contains blank".into()));
        }
        if s >= vocab {
            return Err(AkvsrError::Dimension(format!(
                "target symbol {s} outside vocab of size {vocab}"
            )));
        }
    }
    Ok(())
}

fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Blank-extended target: blank ⊔ s1 ⊔ blank ⊔ s2 ... ⊔ blank, length 2L+1.
fn extend(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &s in target {
        ext.push(s);
        ext.push(BLANK);
    }
    ext
}

/// Negative log CTC probability via the standard forward DP, built from
/// `logaddexp` graph nodes so gradients flow back into `log_probs`.
///
/// `log_probs` must be `[T x vocab]` with each row a log-distribution.
pub fn ctc_loss(log_probs: &Var, target: &[usize]) -> Result<CtcLoss> {
    let lp = log_probs.value();
    if lp.shape().len() != 2 {
        return Err(AkvsrError::Dimension(format!(
            "log_probs must be [T x vocab], got {:?}",
            lp.shape()
        )));
    }
    let (t_len, vocab) = (lp.rows(), lp.cols());
    validate_target(target, vocab)?;
    if t_len < target.len() + repeats(target) {
        return Ok(CtcLoss::Infeasible);
    }

    let ext = extend(target);
    let s_len = ext.len();
    // alpha[s] at the current time step; None stands for log 0.
    let mut alpha: Vec<Option<Var>> = vec![None; s_len];
    alpha[0] = Some(log_probs.index2(0, ext[0])?);
    if s_len > 1 {
        alpha[1] = Some(log_probs.index2(0, ext[1])?);
    }
    for t in 1..t_len {
        let mut next: Vec<Option<Var>> = vec![None; s_len];
        for s in 0..s_len {
            // Reachability window: s <= 2t+1 and enough steps remain.
            if s > 2 * t + 1 {
                continue;
            }
            let mut terms: Vec<Var> = Vec::with_capacity(3);
            if let Some(a) = &alpha[s] {
                terms.push(a.clone());
            }
            if s >= 1 {
                if let Some(a) = &alpha[s - 1] {
                    terms.push(a.clone());
                }
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                if let Some(a) = &alpha[s - 2] {
                    terms.push(a.clone());
                }
            }
            if terms.is_empty() {
                continue;
            }
            let sum = if terms.len() == 1 {
                terms.pop().unwrap()
            } else {
                Var::logaddexp_many(&terms)?
            };
            next[s] = Some(sum.add(&log_probs.index2(t, ext[s])?)?);
        }
        alpha = next;
    }

    let mut finals: Vec<Var> = Vec::new();
    if let Some(a) = &alpha[s_len - 1] {
        finals.push(a.clone());
    }
    if s_len >= 2 {
        if let Some(a) = &alpha[s_len - 2] {
            finals.push(a.clone());
        }
    }
    if finals.is_empty() {
        // Feasibility bound held, so some path must exist.
        return Err(AkvsrError::Contract("CTC DP reached no final state".into()));
    }
    let log_p = if finals.len() == 1 {
        finals.pop().unwrap()
    } else {
        Var::logaddexp_many(&finals)?
    };
    Ok(CtcLoss::Loss(log_p.scale(-1.0)))
}

/// Collapse rule: merge consecutive repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &s in path {
        if s != prev && s != BLANK {
            out.push(s);
        }
        prev = s;
    }
    out
}

/// Independent oracle: enumerates every length-T path over the vocab,
/// collapses it, and sums the probabilities of paths matching the target.
/// Returns `-log` of the sum (`+inf` when no path collapses to the target).
pub fn ctc_bruteforce(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    let (t_len, vocab) = (log_probs.rows(), log_probs.cols());
    validate_target(target, vocab)?;
    let total_paths = (vocab as f64).powi(t_len as i32);
    if total_paths > 1e6 {
        return Err(AkvsrError::Size(format!(
            "{vocab}^{t_len} paths exceed the brute-force budget"
        )));
    }
    let n = total_paths as u64;
    let mut prob = 0.0_f64;
    let mut path = vec![0usize; t_len];
    for code in 0..n {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = (c % vocab as u64) as usize;
            c /= vocab as u64;
        }
        if collapse(&path) == target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &s)| log_probs.at(t, s))
                .sum();
            prob += lp.exp();
        }
    }
    Ok(if prob > 0.0 { -prob.ln() } else { f64::INFINITY })
}

/// Per-frame argmax (ties to the lowest index), then collapse.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let (t_len, vocab) = (log_probs.rows(), log_probs.cols());
    let mut path = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut best = 0usize;
        for j in 1..vocab {
            if log_probs.at(t, j) > log_probs.at(t, best) {
                best = j;
            }
        }
        path.push(best);
    }
    collapse(&path)
}
