//! Toy transformer components: sinusoidal positions, pre-norm multi-head
//! self-attention encoder blocks (the visual context encoder and the
//! 4-layer audio context encoder), and the autoregressive decoder with
//! causal self-attention and cross-attention over encoder output.

use crate::autodiff::Var;
use crate::error::{AkvsrError, Result};
use crate::params::{Leaves, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Token layout: blank = 0, phonemes 1..=P, then BOS, EOS, PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub phonemes: usize,
}

impl Vocab {
    pub fn new(phonemes: usize) -> Self {
        Vocab { phonemes }
    }

    pub fn size(&self) -> usize {
        self.phonemes + 4
    }

    pub fn blank(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        self.phonemes + 1
    }

    pub fn eos(&self) -> usize {
        self.phonemes + 2
    }

    pub fn pad(&self) -> usize {
        self.phonemes + 3
    }

    pub fn token_of_phoneme(&self, phoneme: usize) -> usize {
        debug_assert!(phoneme < self.phonemes);
        phoneme + 1
    }

    pub fn phoneme_of_token(&self, token: usize) -> Option<usize> {
        if (1..=self.phonemes).contains(&token) {
            Some(token - 1)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    /// Sinusoidal positional encodings added to the input.
    pub use_pos: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(AkvsrError::Config(format!(
                "d={} must be divisible by heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    pub vocab: Vocab,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(AkvsrError::Config(format!(
                "d={} must be divisible by heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            out.set(pos, 2 * i, angle.sin());
            out.set(pos, 2 * i + 1, angle.cos());
        }
    }
    out
}

fn init_linear(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
    store.insert(name, Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng));
}

fn init_ln(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]));
}

fn init_attn(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        init_linear(store, format!("{prefix}.{w}"), d, d, rng);
    }
}

pub fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    for l in 0..cfg.layers {
        init_attn(store, &format!("{prefix}.layer{l}.attn"), cfg.d, rng);
        init_ln(store, &format!("{prefix}.layer{l}.ln1"), cfg.d);
        init_ln(store, &format!("{prefix}.layer{l}.ln2"), cfg.d);
        init_linear(store, format!("{prefix}.layer{l}.ff.w1"), cfg.d, cfg.ff, rng);
        init_linear(store, format!("{prefix}.layer{l}.ff.w2"), cfg.ff, cfg.d, rng);
    }
    if cfg.layers > 0 {
        init_ln(store, &format!("{prefix}.ln_out"), cfg.d);
    }
}

pub fn init_decoder(store: &mut ParamStore, prefix: &str, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) {
    store.insert(
        format!("{prefix}.embed"),
        Tensor::randn(&[cfg.vocab.size(), cfg.d], 0.05, rng),
    );
    for l in 0..cfg.layers {
        init_attn(store, &format!("{prefix}.layer{l}.attn"), cfg.d, rng);
        init_attn(store, &format!("{prefix}.layer{l}.cross"), cfg.d, rng);
        init_ln(store, &format!("{prefix}.layer{l}.ln1"), cfg.d);
        init_ln(store, &format!("{prefix}.layer{l}.ln2"), cfg.d);
        init_ln(store, &format!("{prefix}.layer{l}.ln3"), cfg.d);
        init_linear(store, format!("{prefix}.layer{l}.ff.w1"), cfg.d, cfg.ff, rng);
        init_linear(store, format!("{prefix}.layer{l}.ff.w2"), cfg.ff, cfg.d, rng);
    }
    init_ln(store, &format!("{prefix}.ln_out"), cfg.d);
    init_linear(store, format!("{prefix}.proj"), cfg.d, cfg.vocab.size(), rng);
}

const LN_EPS: f64 = 1e-5;

fn layer_norm_named(leaves: &Leaves, prefix: &str, x: &Var) -> Result<Var> {
    x.layer_norm(
        &leaves.get(&format!("{prefix}.gamma")),
        &leaves.get(&format!("{prefix}.beta")),
        LN_EPS,
    )
}

/// Multi-head scaled dot-product attention with per-head column slices.
/// `causal` masks scores above the diagonal (query i attends to keys <= i).
fn mha(
    leaves: &Leaves,
    prefix: &str,
    q_in: &Var,
    kv_in: &Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = q_in.value().cols();
    let dh = d / heads;
    let q = q_in.matmul(&leaves.get(&format!("{prefix}.wq")))?;
    let k = kv_in.matmul(&leaves.get(&format!("{prefix}.wk")))?;
    let v = kv_in.matmul(&leaves.get(&format!("{prefix}.wv")))?;
    let tq = q.value().rows();
    let tk = k.value().rows();
    let mask = if causal {
        let mut m = Tensor::zeros(&[tq, tk]);
        for i in 0..tq {
            for j in (i + 1)..tk {
                m.set(i, j, f64::NEG_INFINITY);
            }
        }
        Some(m)
    } else {
        None
    };
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
        let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
        let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
        let mut scores = qh.matmul(&kh.transpose())?;
        if let Some(m) = &mask {
            scores = scores.add_const(m)?;
        }
        let attn = scores.softmax_rows((dh as f64).sqrt())?;
        head_outs.push(attn.matmul(&vh)?);
    }
    Var::concat_cols(&head_outs)?.matmul(&leaves.get(&format!("{prefix}.wo")))
}

fn feed_forward(leaves: &Leaves, prefix: &str, x: &Var) -> Result<Var> {
    x.matmul(&leaves.get(&format!("{prefix}.w1")))?
        .relu()
        .matmul(&leaves.get(&format!("{prefix}.w2")))
}

/// Pre-norm encoder stack. A zero-layer stack is the identity.
pub fn encode(leaves: &Leaves, prefix: &str, cfg: &EncoderConfig, x: &Var) -> Result<Var> {
    cfg.validate()?;
    if x.value().cols() != cfg.d {
        return Err(AkvsrError::Dimension(format!(
            "encoder expects width {}, got {:?}",
            cfg.d,
            x.value().shape()
        )));
    }
    if cfg.layers == 0 {
        return Ok(x.clone());
    }
    let mut h = if cfg.use_pos {
        x.add_const(&positional_encoding(x.value().rows(), cfg.d))?
    } else {
        x.clone()
    };
    for l in 0..cfg.layers {
        let base = format!("{prefix}.layer{l}");
        let normed = layer_norm_named(leaves, &format!("{base}.ln1"), &h)?;
        h = h.add(&mha(leaves, &format!("{base}.attn"), &normed, &normed, cfg.heads, false)?)?;
        let normed = layer_norm_named(leaves, &format!("{base}.ln2"), &h)?;
        h = h.add(&feed_forward(leaves, &format!("{base}.ff"), &normed)?)?;
    }
    layer_norm_named(leaves, &format!("{prefix}.ln_out"), &h)
}

/// Full teacher-forced decoder pass: logits `[len(tokens) x vocab]`, row l
/// predicting the token after `tokens[..=l]`.
pub fn decoder_logits(
    leaves: &Leaves,
    prefix: &str,
    cfg: &DecoderConfig,
    tokens: &[usize],
    enc: &Var,
) -> Result<Var> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(AkvsrError::Contract("decoder prefix must start with BOS".into()));
    }
    if tokens[0] != cfg.vocab.bos() {
        return Err(AkvsrError::Contract(format!(
            "decoder prefix must start with BOS ({}), got {}",
            cfg.vocab.bos(),
            tokens[0]
        )));
    }
    let embed = leaves.get(&format!("{prefix}.embed"));
    let mut h = embed
        .gather_rows(tokens)?
        .add_const(&positional_encoding(tokens.len(), cfg.d))?;
    for l in 0..cfg.layers {
        let base = format!("{prefix}.layer{l}");
        let normed = layer_norm_named(leaves, &format!("{base}.ln1"), &h)?;
        h = h.add(&mha(leaves, &format!("{base}.attn"), &normed, &normed, cfg.heads, true)?)?;
        let normed = layer_norm_named(leaves, &format!("{base}.ln2"), &h)?;
        h = h.add(&mha(leaves, &format!("{base}.cross"), &normed, enc, cfg.heads, false)?)?;
        let normed = layer_norm_named(leaves, &format!("{base}.ln3"), &h)?;
        h = h.add(&feed_forward(leaves, &format!("{base}.ff"), &normed)?)?;
    }
    let h = layer_norm_named(leaves, &format!("{prefix}.ln_out"), &h)?;
    h.matmul(&leaves.get(&format!("{prefix}.proj")))
}

/// Logits over the vocab for the position following `prefix`.
pub fn decode_step(
    leaves: &Leaves,
    prefix_name: &str,
    cfg: &DecoderConfig,
    prefix: &[usize],
    enc: &Var,
) -> Result<Vec<f64>> {
    let logits = decoder_logits(leaves, prefix_name, cfg, prefix, enc)?;
    Ok(logits.value().row(prefix.len() - 1).to_vec())
}

/// Greedy autoregressive decode. Emits phoneme indices only; stops at EOS
/// or `max_len`. BOS, PAD, and blank can never be emitted.
pub fn greedy_decode(
    leaves: &Leaves,
    prefix_name: &str,
    cfg: &DecoderConfig,
    enc: &Var,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len < 1 {
        return Err(AkvsrError::Config("maxLen must be >= 1".into()));
    }
    let vocab = cfg.vocab;
    let mut tokens = vec![vocab.bos()];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = decode_step(leaves, prefix_name, cfg, &tokens, enc)?;
        // candidates: phonemes and EOS; ties go to the lowest token index
        let mut best = vocab.token_of_phoneme(0);
        let mut best_v = logits[best];
        for ph in 1..vocab.phonemes {
            let t = vocab.token_of_phoneme(ph);
            if logits[t] > best_v {
                best = t;
                best_v = logits[t];
            }
        }
        if logits[vocab.eos()] > best_v {
            break;
        }
        out.push(vocab.phoneme_of_token(best).unwrap());
        tokens.push(best);
    }
    Ok(out)
}
