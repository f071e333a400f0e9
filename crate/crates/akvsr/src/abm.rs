//! Audio Bridging Module: cross-attention from visual features into the
//! compact audio memory, reconstruction of per-frame audio knowledge as a
//! convex combination of projected slots, and residual injection through
//! LayerNorm. Stacked k times with per-layer weights; k = 0 is the
//! no-memory baseline and returns the input unchanged.

use crate::autodiff::Var;
use crate::error::{AkvsrError, Result};
use crate::params::{Leaves, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct AbmConfig {
    /// Visual feature width (and injection output width).
    pub d: usize,
    /// Total query/key width across heads.
    pub d_k: usize,
    /// Total value width across heads.
    pub d_v: usize,
    pub heads: usize,
    /// Attention scaling; `None` selects sqrt(d_k / heads) per head.
    pub tau: Option<f64>,
    pub depth: usize,
}

impl AbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k % self.heads != 0 || self.d_v % self.heads != 0 {
            return Err(AkvsrError::Config(format!(
                "d_k={} and d_v={} must be divisible by heads={}",
                self.d_k, self.d_v, self.heads
            )));
        }
        if let Some(tau) = self.tau {
            if tau <= 0.0 {
                return Err(AkvsrError::Config(format!("tau must be positive, got {tau}")));
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.tau
            .unwrap_or_else(|| ((self.d_k / self.heads) as f64).sqrt())
    }
}

pub fn init_abm(store: &mut ParamStore, cfg: &AbmConfig, rng: &mut ChaCha8Rng) {
    for k in 0..cfg.depth {
        let base = format!("abm.layer{k}");
        let s = 1.0 / (cfg.d as f64).sqrt();
        store.insert(format!("{base}.wq"), Tensor::randn(&[cfg.d, cfg.d_k], s, rng));
        store.insert(format!("{base}.wk"), Tensor::randn(&[cfg.d, cfg.d_k], s, rng));
        store.insert(format!("{base}.wv"), Tensor::randn(&[cfg.d, cfg.d_v], s, rng));
        store.insert(
            format!("{base}.wo"),
            Tensor::randn(&[cfg.d_v, cfg.d], 1.0 / (cfg.d_v as f64).sqrt(), rng),
        );
        store.insert(format!("{base}.ln.gamma"), Tensor::ones(&[cfg.d]));
        store.insert(format!("{base}.ln.beta"), Tensor::zeros(&[cfg.d]));
    }
}

/// Per-head attention scores over the N memory slots, each `[T_v x N]`
/// and row-stochastic. With one head this is exactly the softmax of
/// `(f_v W_Qv)(M_a W_Ka)^T / tau`.
pub fn attention_scores(
    leaves: &Leaves,
    layer: usize,
    cfg: &AbmConfig,
    f_v: &Var,
    slots: &Var,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let base = format!("abm.layer{layer}");
    if f_v.value().cols() != cfg.d || slots.value().cols() != cfg.d {
        return Err(AkvsrError::Dimension(format!(
            "ABM expects width {}, got visual {:?} and memory {:?}",
            cfg.d,
            f_v.value().shape(),
            slots.value().shape()
        )));
    }
    let q = f_v.matmul(&leaves.get(&format!("{base}.wq")))?;
    let k = slots.matmul(&leaves.get(&format!("{base}.wk")))?;
    let dh = cfg.d_k / cfg.heads;
    let mut scores = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
        let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
        scores.push(qh.matmul(&kh.transpose())?.softmax_rows(cfg.tau())?);
    }
    Ok(scores)
}

/// Reconstructs frame-wise audio knowledge `m' = A (M_a W_Va)` per head,
/// heads concatenated to width d_v. Every row is a convex combination of
/// the projected slots.
pub fn reconstruct(
    leaves: &Leaves,
    layer: usize,
    cfg: &AbmConfig,
    scores: &[Var],
    slots: &Var,
) -> Result<Var> {
    let base = format!("abm.layer{layer}");
    let v = slots.matmul(&leaves.get(&format!("{base}.wv")))?;
    let dh = cfg.d_v / cfg.heads;
    let mut parts = Vec::with_capacity(cfg.heads);
    for (h, a) in scores.iter().enumerate() {
        let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
        parts.push(a.matmul(&vh)?);
    }
    Var::concat_cols(&parts)
}

/// Residual injection: `LN(f_v + m' W_o)`. Output length is always T_v,
/// whatever N is — no audio/visual alignment happens here.
pub fn inject(leaves: &Leaves, layer: usize, f_v: &Var, m_prime: &Var) -> Result<Var> {
    let base = format!("abm.layer{layer}");
    let projected = m_prime.matmul(&leaves.get(&format!("{base}.wo")))?;
    f_v.add(&projected)?.layer_norm(
        &leaves.get(&format!("{base}.ln.gamma")),
        &leaves.get(&format!("{base}.ln.beta")),
        1e-5,
    )
}

/// Sequential stack: `f^(k) = inject(layer_k, f^(k-1), reconstruct(...))`.
pub fn forward(leaves: &Leaves, cfg: &AbmConfig, f_v: &Var, slots: &Var) -> Result<Var> {
    cfg.validate()?;
    let mut h = f_v.clone();
    for k in 0..cfg.depth {
        let scores = attention_scores(leaves, k, cfg, &h, slots)?;
        let m_prime = reconstruct(leaves, k, cfg, &scores, slots)?;
        h = inject(leaves, k, &h, &m_prime)?;
    }
    Ok(h)
}
