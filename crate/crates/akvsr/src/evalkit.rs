//! Evaluation: word error rate with a deterministic edit breakdown, the
//! end-to-end pipeline runner, and the ablation sweep.

use crate::config::RunConfig;
use crate::corpus::{generate_split, make_inventory, Split};
use crate::error::{AkvsrError, Result};
use crate::memory;
use crate::quantizer::{fit_kmeans, purity_and_leakage, stack_audio_frames};
use crate::trainer::{train_memory_asr, train_vsr};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
    pub wer: f64,
}

/// Levenshtein alignment of `hyp` against `reference`. Among all
/// minimal-edit alignments the breakdown prefers substitutions over
/// insertions over deletions; that choice is unique, because with the
/// total and the length gap fixed, maximizing substitutions pins down all
/// three counts.
pub fn wer(hyp: &[usize], reference: &[usize]) -> Result<WerReport> {
    let n = reference.len();
    let m = hyp.len();
    if n == 0 {
        return Err(AkvsrError::Data("WER reference must be non-empty".into()));
    }
    // dist[i][j]: edit distance between reference[..i] and hyp[..j];
    // maxs[i][j]: max substitution count among minimal alignments.
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    let mut maxs = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..=n {
        dist[i][0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hyp[j - 1]);
            let diag = dist[i - 1][j - 1] + sub_cost;
            let ins = dist[i][j - 1] + 1;
            let del = dist[i - 1][j] + 1;
            let best = diag.min(ins).min(del);
            dist[i][j] = best;
            let mut s = None;
            if diag == best {
                s = Some(maxs[i - 1][j - 1] + sub_cost);
            }
            if ins == best {
                s = Some(s.map_or(maxs[i][j - 1], |v: usize| v.max(maxs[i][j - 1])));
            }
            if del == best {
                s = Some(s.map_or(maxs[i - 1][j], |v: usize| v.max(maxs[i - 1][j])));
            }
            maxs[i][j] = s.unwrap();
        }
    }
    let total = dist[n][m];
    let s = maxs[n][m];
    let gap = m as i64 - n as i64; // insertions - deletions
    let twice_d = total as i64 - gap - s as i64;
    if twice_d < 0 || twice_d % 2 != 0 {
        return Err(AkvsrError::Contract(format!(
            "inconsistent edit breakdown: total={total}, subs={s}, gap={gap}"
        )));
    }
    let d = (twice_d / 2) as usize;
    let i = (d as i64 + gap) as usize;
    let wer = total as f64 / n as f64;
    Ok(WerReport {
        substitutions: s,
        insertions: i,
        deletions: d,
        reference_length: n,
        wer,
    })
}

// ---- end-to-end pipeline ----

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub asr_wer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vsr_wer_baseline: Option<f64>,
    pub vsr_wer_abm: f64,
    pub purity: f64,
    pub speaker_nmi: f64,
    pub skipped_infeasible: usize,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub asr_store: crate::params::ParamStore,
    pub vsr_store: crate::params::ParamStore,
    pub baseline_store: Option<crate::params::ParamStore>,
}

/// Full run: corpus -> quantizer -> memory ASR -> VSR with injection. With
/// `with_baseline`, an identical VSR run at injection depth 0 is trained
/// for comparison.
pub fn run_pipeline(cfg: &RunConfig, with_baseline: bool) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let c = &cfg.corpus;
    let inv = make_inventory(c.p, c.v, c.d_a, c.d, c.seed)?;
    let train = generate_split(c, &inv, Split::Train, cfg.train_size)?;
    let test = generate_split(c, &inv, Split::Test, cfg.test_size)?;
    let quantfit = generate_split(c, &inv, Split::Quantfit, cfg.quantfit_size)?;

    let frames = stack_audio_frames(&quantfit)?;
    let cluster = fit_kmeans(&frames, cfg.clusters, cfg.kmeans_iters, c.seed)?;
    let dis = purity_and_leakage(&cluster, &train, c.p, c.s)?;

    let asr = train_memory_asr(&train, &test, &cluster, &cfg.model, &cfg.train_asr, cfg.clusters)?;
    let slots = asr.store.get(memory::SLOTS_NAME)?.clone();

    let vsr = train_vsr(
        &train,
        &test,
        slots.clone(),
        &cfg.model,
        &cfg.train_vsr,
        cfg.freeze_memory,
    )?;

    let (vsr_wer_baseline, baseline_store) = if with_baseline {
        let mut base_model = cfg.model.clone();
        base_model.abm_depth = 0;
        let base = train_vsr(&train, &test, slots, &base_model, &cfg.train_vsr, cfg.freeze_memory)?;
        (Some(base.final_wer), Some(base.store))
    } else {
        (None, None)
    };

    Ok(PipelineOutcome {
        report: PipelineReport {
            asr_wer: asr.final_wer,
            vsr_wer_baseline,
            vsr_wer_abm: vsr.final_wer,
            purity: dis.phoneme_purity,
            speaker_nmi: dis.speaker_nmi,
            skipped_infeasible: asr.skipped_infeasible + vsr.skipped_infeasible,
        },
        asr_store: asr.store,
        vsr_store: vsr.store,
        baseline_store,
    })
}

// ---- ablations ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Clusters,
    AbmDepth,
    MemoryDim,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clusters" => Ok(AblationAxis::Clusters),
            "abm-depth" => Ok(AblationAxis::AbmDepth),
            "memory-dim" => Ok(AblationAxis::MemoryDim),
            other => Err(AkvsrError::Config(format!(
                "unknown ablation axis {other:?} (expected clusters, abm-depth, or memory-dim)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Clusters => "clusters",
            AblationAxis::AbmDepth => "abm-depth",
            AblationAxis::MemoryDim => "memory-dim",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: usize) {
        match self {
            AblationAxis::Clusters => cfg.clusters = value,
            AblationAxis::AbmDepth => cfg.model.abm_depth = value,
            AblationAxis::MemoryDim => {
                cfg.model.d = value;
                cfg.model.d_k = value;
                cfg.model.d_v = value;
                cfg.corpus.d = value;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub axis_value: usize,
    pub seed: u64,
    pub wer: f64,
    pub asr_wer: f64,
    pub purity: f64,
    pub speaker_nmi: f64,
}

/// One pipeline run per (value, seed); at least three seeds so every
/// direction claim averages over initializations.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[usize],
    seeds: &[u64],
    base: &RunConfig,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(AkvsrError::Config("ablation needs at least one axis value".into()));
    }
    if seeds.len() < 3 {
        return Err(AkvsrError::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut cfg = base.clone().with_seed(seed);
            axis.apply(&mut cfg, value);
            let report = run_pipeline(&cfg, false)?.report;
            rows.push(AblationRow {
                axis_value: value,
                seed,
                wer: report.vsr_wer_abm,
                asr_wer: report.asr_wer,
                purity: report.purity,
                speaker_nmi: report.speaker_nmi,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis_value,seed,wer,asr_wer,purity,speaker_nmi\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis_value, r.seed, r.wer, r.asr_wer, r.purity, r.speaker_nmi
        ));
    }
    out
}
