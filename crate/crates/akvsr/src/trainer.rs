//! Hybrid CTC/attention training: the teacher-forced attention loss, the
//! weighted hybrid loss, Adam, and the two stages — (1) ASR through the
//! compact audio memory to charge its slots with linguistic content, and
//! (2) VSR with the frozen memory injected through the ABM stack.

use crate::abm::{self, AbmConfig};
use crate::autodiff::{backward, Var};
use crate::corpus::SyntheticSample;
use crate::ctc::{ctc_loss, CtcLoss};
use crate::error::{AkvsrError, Result};
use crate::evalkit;
use crate::memory;
use crate::params::{Leaves, ParamStore};
use crate::quantizer::{quantize, ClusterModel};
use crate::seqnet::{
    self, decoder_logits, encode, greedy_decode, DecoderConfig, EncoderConfig, Vocab,
};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub visual_layers: usize,
    pub context_layers: usize,
    pub decoder_layers: usize,
    pub abm_depth: usize,
    pub abm_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub tau: Option<f64>,
    pub phonemes: usize,
}

impl ModelConfig {
    pub fn toy(phonemes: usize) -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            ff: 64,
            visual_layers: 2,
            context_layers: 4,
            decoder_layers: 2,
            abm_depth: 2,
            abm_heads: 4,
            d_k: 32,
            d_v: 32,
            tau: None,
            phonemes,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.phonemes)
    }

    pub fn abm_cfg(&self) -> AbmConfig {
        AbmConfig {
            d: self.d,
            d_k: self.d_k,
            d_v: self.d_v,
            heads: self.abm_heads,
            tau: self.tau,
            depth: self.abm_depth,
        }
    }

    fn enc_cfg(&self, layers: usize) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            heads: self.heads,
            ff: self.ff,
            layers,
            use_pos: true,
        }
    }

    fn dec_cfg(&self) -> DecoderConfig {
        DecoderConfig {
            d: self.d,
            heads: self.heads,
            ff: self.ff,
            layers: self.decoder_layers,
            vocab: self.vocab(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.enc_cfg(1).validate()?;
        self.dec_cfg().validate()?;
        self.abm_cfg().validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// CTC weight in the hybrid loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(AkvsrError::Config(format!(
                "lambda must be in [0,1], got {}",
                self.lambda
            )));
        }
        if self.lr <= 0.0 || self.batch_size == 0 || self.steps == 0 {
            return Err(AkvsrError::Config("lr, batch size, and steps must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 3e-4,
            batch_size: 8,
            steps: 3000,
            eval_every: 200,
            seed: 0,
        }
    }
}

// ---- losses ----

/// Teacher-forced negative log-likelihood of the target under the decoder.
/// `target` is phoneme tokens and must end with EOS.
pub fn attention_loss(
    leaves: &Leaves,
    prefix: &str,
    cfg: &DecoderConfig,
    enc: &Var,
    target: &[usize],
) -> Result<Var> {
    let vocab = cfg.vocab;
    if target.last() != Some(&vocab.eos()) {
        return Err(AkvsrError::Contract("attention target must end with EOS".into()));
    }
    if target.iter().any(|&t| t == vocab.blank()) {
        return Err(AkvsrError::Contract("attention target contains blank".into()));
    }
    let mut input = Vec::with_capacity(target.len());
    input.push(vocab.bos());
    input.extend_from_slice(&target[..target.len() - 1]);
    let logits = decoder_logits(leaves, prefix, cfg, &input, enc)?;
    let log_probs = logits.log_softmax_rows()?;
    let mut nll: Option<Var> = None;
    for (l, &tok) in target.iter().enumerate() {
        let term = log_probs.index2(l, tok)?;
        nll = Some(match nll {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(nll.unwrap().scale(-1.0))
}

/// `(1 - lambda) * att + lambda * ctc`; `None` is the typed skip signal for
/// CTC-infeasible batch elements.
pub fn hybrid_loss(ctc: &CtcLoss, att: &Var, lambda: f64) -> Result<Option<Var>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AkvsrError::Parameter(format!("lambda must be in [0,1], got {lambda}")));
    }
    match ctc {
        CtcLoss::Infeasible => Ok(None),
        CtcLoss::Loss(c) => Ok(Some(att.scale(1.0 - lambda).add(&c.scale(lambda))?)),
    }
}

// ---- optimizer ----

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over the supplied gradients. Parameters without a
    /// gradient this step are untouched (moments included). Stepping a
    /// frozen parameter is a contract violation, not a silent no-op.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if store.is_frozen(name) {
                return Err(AkvsrError::Contract(format!(
                    "optimizer step on frozen parameter {name:?}"
                )));
            }
            if !g.all_finite() {
                return Err(AkvsrError::Contract(format!("non-finite gradient for {name:?}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let shape = g.shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let mut p = store.get(name)?.clone();
            let (m, v) = (&self.m[name], &self.v[name]);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(name, p)?;
        }
        Ok(())
    }
}

// ---- shared training machinery ----

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub ctc: f64,
    pub att: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer_eval: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub logs: Vec<StepLog>,
    pub final_wer: f64,
    pub skipped_infeasible: usize,
}

fn target_tokens(vocab: Vocab, transcript: &[usize]) -> Vec<usize> {
    transcript.iter().map(|&p| vocab.token_of_phoneme(p)).collect()
}

fn collect_grads(leaves: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor> {
    leaves
        .iter()
        .filter_map(|(name, leaf)| leaf.grad().map(|g| (name.clone(), g)))
        .collect()
}

struct BatchIter {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchIter {
    fn new(n: usize, seed: u64) -> Self {
        let mut it = BatchIter {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x94D0_49BB_1331_11EB).wrapping_add(17)),
        };
        it.order.shuffle(&mut it.rng);
        it
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean corpus-level WER of greedy attention decoding against transcripts.
fn eval_wer<F>(samples: &[SyntheticSample], mut decode: F) -> Result<f64>
where
    F: FnMut(&SyntheticSample) -> Result<Vec<usize>>,
{
    let mut errors = 0usize;
    let mut ref_len = 0usize;
    for s in samples {
        let hyp = decode(s)?;
        let report = evalkit::wer(&hyp, &s.utterance.transcript)?;
        errors += report.substitutions + report.insertions + report.deletions;
        ref_len += report.reference_length;
    }
    Ok(errors as f64 / ref_len as f64)
}

// ---- stage 1: memory ASR ----

/// Per-sample stage-1 forward: quantize -> memory lookup -> 4-layer context
/// encoder; returns the encoded sequence (decoder and CTC head tap it).
fn asr_encode(
    leaves: &Leaves,
    model: &ModelConfig,
    labels: &[usize],
) -> Result<Var> {
    let slots = leaves.get(memory::SLOTS_NAME);
    let looked_up = memory::lookup(&slots, labels)?;
    encode(leaves, "ctx_encoder", &model.enc_cfg(model.context_layers), &looked_up)
}

pub fn eval_asr_wer(
    store: &ParamStore,
    cluster: &ClusterModel,
    model: &ModelConfig,
    samples: &[SyntheticSample],
) -> Result<f64> {
    let leaves = store.leaves();
    let lv = Leaves::new(&leaves);
    let dec_cfg = model.dec_cfg();
    eval_wer(samples, |s| {
        let labels = quantize(cluster, &s.audio)?;
        let enc = asr_encode(&lv, model, &labels)?;
        greedy_decode(&lv, "asr.decoder", &dec_cfg, &enc, crate::corpus::MAX_TRANSCRIPT_LEN + 2)
    })
}

/// Stage 1: ASR through the compact audio memory. Trains the memory slots,
/// the 4-layer context encoder, the ASR decoder, and the CTC head with the
/// hybrid loss; reports held-out WER from greedy attention decoding.
pub fn train_memory_asr(
    train: &[SyntheticSample],
    heldout: &[SyntheticSample],
    cluster: &ClusterModel,
    model: &ModelConfig,
    cfg: &TrainConfig,
    n_mem: usize,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if n_mem != cluster.n {
        return Err(AkvsrError::Config(format!(
            "memory slot count {n_mem} does not match cluster count {}",
            cluster.n
        )));
    }
    if train.is_empty() {
        return Err(AkvsrError::Data("empty training split".into()));
    }
    let vocab = model.vocab();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0xE703_7ED1_A0B4_28DB).wrapping_add(23));
    store.insert(memory::SLOTS_NAME, memory::init_memory(n_mem, model.d, cfg.seed)?);
    seqnet::init_encoder(&mut store, "ctx_encoder", &model.enc_cfg(model.context_layers), &mut rng);
    seqnet::init_decoder(&mut store, "asr.decoder", &model.dec_cfg(), &mut rng);
    store.insert(
        "asr.ctc.proj",
        Tensor::randn(&[model.d, vocab.size()], 1.0 / (model.d as f64).sqrt(), &mut rng),
    );

    let labels: Vec<Vec<usize>> = train
        .iter()
        .map(|s| quantize(cluster, &s.audio))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(cfg.lr);
    let mut batches = BatchIter::new(train.len(), cfg.seed);
    let mut logs = Vec::new();
    let mut skipped = 0usize;
    let dec_cfg = model.dec_cfg();

    for step in 1..=cfg.steps {
        let leaves = store.leaves();
        let lv = Leaves::new(&leaves);
        let batch = batches.next_batch(cfg.batch_size);
        let mut total: Option<Var> = None;
        let mut ctc_sum = 0.0;
        let mut att_sum = 0.0;
        let mut used = 0usize;
        for &i in &batch {
            let s = &train[i];
            let enc = asr_encode(&lv, model, &labels[i])?;
            let ctc_logits = enc.matmul(&lv.get("asr.ctc.proj"))?;
            let ctc = ctc_loss(&ctc_logits.log_softmax_rows()?, &target_tokens(vocab, &s.utterance.transcript))?;
            let mut att_target = target_tokens(vocab, &s.utterance.transcript);
            att_target.push(vocab.eos());
            let att = attention_loss(&lv, "asr.decoder", &dec_cfg, &enc, &att_target)?;
            match hybrid_loss(&ctc, &att, cfg.lambda)? {
                Some(h) => {
                    ctc_sum += ctc.value();
                    att_sum += att.value().scalar_value();
                    total = Some(match total {
                        Some(acc) => acc.add(&h)?,
                        None => h,
                    });
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        let Some(total) = total else {
            continue;
        };
        let loss = total.scale(1.0 / used as f64);
        backward(&loss)?;
        adam.step(&mut store, &collect_grads(&leaves))?;
        let wer_eval = if step % cfg.eval_every == 0 || step == cfg.steps {
            Some(eval_asr_wer(&store, cluster, model, heldout)?)
        } else {
            None
        };
        logs.push(StepLog {
            step,
            loss: loss.value().scalar_value(),
            ctc: ctc_sum / used as f64,
            att: att_sum / used as f64,
            wer_eval,
        });
    }
    let final_wer = eval_asr_wer(&store, cluster, model, heldout)?;
    Ok(TrainOutcome {
        store,
        logs,
        final_wer,
        skipped_infeasible: skipped,
    })
}

// ---- stage 2: VSR with ABM ----

/// Stage-2 forward: visual context encoder then the ABM stack over the
/// (frozen) memory; the result feeds both the CTC head and the decoder.
fn vsr_encode(leaves: &Leaves, model: &ModelConfig, visual: &Tensor) -> Result<Var> {
    let f_v = encode(
        leaves,
        "vis_encoder",
        &model.enc_cfg(model.visual_layers),
        &Var::constant(visual.clone()),
    )?;
    if model.abm_depth == 0 {
        return Ok(f_v);
    }
    let slots = leaves.get(memory::SLOTS_NAME);
    abm::forward(leaves, &model.abm_cfg(), &f_v, &slots)
}

pub fn eval_vsr_wer(store: &ParamStore, model: &ModelConfig, samples: &[SyntheticSample]) -> Result<f64> {
    let leaves = store.leaves();
    let lv = Leaves::new(&leaves);
    let dec_cfg = model.dec_cfg();
    eval_wer(samples, |s| {
        let enc = vsr_encode(&lv, model, &s.visual)?;
        greedy_decode(&lv, "vsr.decoder", &dec_cfg, &enc, crate::corpus::MAX_TRANSCRIPT_LEN + 2)
    })
}

/// Stage 2: lip-to-text with audio knowledge injection. `memory_slots`
/// comes from the stage-1 checkpoint and stays frozen unless
/// `freeze_memory` is false (the unfrozen control run).
pub fn train_vsr(
    train: &[SyntheticSample],
    test: &[SyntheticSample],
    memory_slots: Tensor,
    model: &ModelConfig,
    cfg: &TrainConfig,
    freeze_memory: bool,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if model.abm_depth > 0 && memory_slots.cols() != model.d {
        return Err(AkvsrError::Config(format!(
            "memory dim {} does not match model d {}",
            memory_slots.cols(),
            model.d
        )));
    }
    if train.is_empty() {
        return Err(AkvsrError::Data("empty training split".into()));
    }
    let vocab = model.vocab();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).wrapping_add(29));
    seqnet::init_encoder(&mut store, "vis_encoder", &model.enc_cfg(model.visual_layers), &mut rng);
    if model.abm_depth > 0 {
        abm::init_abm(&mut store, &model.abm_cfg(), &mut rng);
        store.insert(memory::SLOTS_NAME, memory_slots);
        if freeze_memory {
            store.freeze(memory::SLOTS_NAME)?;
        }
    }
    seqnet::init_decoder(&mut store, "vsr.decoder", &model.dec_cfg(), &mut rng);
    store.insert(
        "vsr.ctc.proj",
        Tensor::randn(&[model.d, vocab.size()], 1.0 / (model.d as f64).sqrt(), &mut rng),
    );

    let mut adam = Adam::new(cfg.lr);
    let mut batches = BatchIter::new(train.len(), cfg.seed);
    let mut logs = Vec::new();
    let mut skipped = 0usize;
    let dec_cfg = model.dec_cfg();

    for step in 1..=cfg.steps {
        let leaves = store.leaves();
        let lv = Leaves::new(&leaves);
        let batch = batches.next_batch(cfg.batch_size);
        let mut total: Option<Var> = None;
        let mut ctc_sum = 0.0;
        let mut att_sum = 0.0;
        let mut used = 0usize;
        for &i in &batch {
            let s = &train[i];
            let enc = vsr_encode(&lv, model, &s.visual)?;
            let ctc_logits = enc.matmul(&lv.get("vsr.ctc.proj"))?;
            let ctc = ctc_loss(&ctc_logits.log_softmax_rows()?, &target_tokens(vocab, &s.utterance.transcript))?;
            let mut att_target = target_tokens(vocab, &s.utterance.transcript);
            att_target.push(vocab.eos());
            let att = attention_loss(&lv, "vsr.decoder", &dec_cfg, &enc, &att_target)?;
            match hybrid_loss(&ctc, &att, cfg.lambda)? {
                Some(h) => {
                    ctc_sum += ctc.value();
                    att_sum += att.value().scalar_value();
                    total = Some(match total {
                        Some(acc) => acc.add(&h)?,
                        None => h,
                    });
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        let Some(total) = total else {
            continue;
        };
        let loss = total.scale(1.0 / used as f64);
        backward(&loss)?;
        adam.step(&mut store, &collect_grads(&leaves))?;
        let wer_eval = if step % cfg.eval_every == 0 || step == cfg.steps {
            Some(eval_vsr_wer(&store, model, test)?)
        } else {
            None
        };
        logs.push(StepLog {
            step,
            loss: loss.value().scalar_value(),
            ctc: ctc_sum / used as f64,
            att: att_sum / used as f64,
            wer_eval,
        });
    }
    let final_wer = eval_vsr_wer(&store, model, test)?;
    Ok(TrainOutcome {
        store,
        logs,
        final_wer,
        skipped_infeasible: skipped,
    })
}
