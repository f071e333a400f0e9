use akvsr::abm;
use akvsr::autodiff::{grad_check, Var};
use akvsr::checkpoint;
use akvsr::config::RunConfig;
use akvsr::corpus::{generate_corpus, make_inventory, read_split};
use akvsr::ctc::{ctc_loss, CtcLoss};
use akvsr::error::{AkvsrError, Result};
use akvsr::evalkit::{ablation_csv, run_ablation, run_pipeline, AblationAxis};
use akvsr::memory;
use akvsr::params::{Leaves, ParamStore};
use akvsr::quantizer::{fit_kmeans, purity_and_leakage, stack_audio_frames, ClusterModel};
use akvsr::seqnet;
use akvsr::tensor::Tensor;
use akvsr::trainer::{self, eval_asr_wer, eval_vsr_wer, train_memory_asr, train_vsr};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "akvsr", about = "Visual speech recognition with a compact audio memory")]
struct Cli {
    /// Run configuration JSON; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the AKVSR_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the train / test / quantfit splits to JSONL.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the frame quantizer on the single-speaker split.
    FitQuantizer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: ASR through the compact audio memory.
    TrainMemory {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        quantizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Step log JSONL; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage 2: VSR with audio knowledge injection.
    TrainVsr {
        #[arg(long)]
        corpus: PathBuf,
        /// Stage-1 checkpoint holding the memory slots.
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Injection depth override; 0 is the no-memory baseline.
        #[arg(long)]
        depth: Option<usize>,
        /// Control: let the memory keep training in stage 2.
        #[arg(long)]
        unfreeze: bool,
        /// Control: replace the learned memory with zeros.
        #[arg(long)]
        zero_slots: bool,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Test-split WER of a trained checkpoint.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Required for stage-1 (ASR) checkpoints.
        #[arg(long)]
        quantizer: Option<PathBuf>,
    },
    /// Sweep one axis over several seeds and write a CSV.
    Ablate {
        /// clusters | abm-depth | memory-dim
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference spot checks of every differentiable block.
    Gradcheck,
    /// Full run: corpus, quantizer, both stages, report JSON on stdout.
    Pipeline {
        /// Also train the injection-free baseline for comparison.
        #[arg(long)]
        baseline: bool,
        /// Directory for checkpoints and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                AkvsrError::Config(_) => ExitCode::from(2),
                AkvsrError::Integrity(_) | AkvsrError::Version { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let env_seed = match std::env::var("AKVSR_SEED") {
        Ok(s) => Some(s.parse::<u64>().map_err(|_| {
            AkvsrError::Config(format!("AKVSR_SEED must be an unsigned integer, got {s:?}"))
        })?),
        Err(_) => None,
    };
    if let Some(seed) = cli.seed.or(env_seed) {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_corpus(cfg: &RunConfig, dir: &Path, split: &str) -> Result<Vec<akvsr::corpus::SyntheticSample>> {
    let c = &cfg.corpus;
    let inv = make_inventory(c.p, c.v, c.d_a, c.d, c.seed)?;
    read_split(&dir.join(format!("{split}.jsonl")), &inv)
}

fn load_quantizer(path: &Path) -> Result<ClusterModel> {
    let text = std::fs::read_to_string(path).map_err(|e| AkvsrError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_logs(logs: &[trainer::StepLog], path: Option<&Path>) -> Result<()> {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    match path {
        Some(p) => std::fs::write(p, out).map_err(|e| AkvsrError::File {
            path: p.display().to_string(),
            source: e,
        }),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::GenCorpus { out } => {
            std::fs::create_dir_all(out).map_err(|e| AkvsrError::File {
                path: out.display().to_string(),
                source: e,
            })?;
            generate_corpus(&cfg.corpus, out, cfg.train_size, cfg.test_size, cfg.quantfit_size)?;
            cfg.save(&out.join("run.json"))?;
            println!(
                "{}",
                serde_json::json!({
                    "train": cfg.train_size,
                    "test": cfg.test_size,
                    "quantfit": cfg.quantfit_size,
                    "out": out.display().to_string(),
                })
            );
            Ok(())
        }
        Cmd::FitQuantizer { corpus, out } => {
            let quantfit = read_corpus(&cfg, corpus, "quantfit")?;
            let train = read_corpus(&cfg, corpus, "train")?;
            let frames = stack_audio_frames(&quantfit)?;
            let model = fit_kmeans(&frames, cfg.clusters, cfg.kmeans_iters, cfg.corpus.seed)?;
            let dis = purity_and_leakage(&model, &train, cfg.corpus.p, cfg.corpus.s)?;
            std::fs::write(out, serde_json::to_string(&model)?).map_err(|e| AkvsrError::File {
                path: out.display().to_string(),
                source: e,
            })?;
            println!(
                "{}",
                serde_json::json!({
                    "clusters": model.n,
                    "iterations": model.iterations,
                    "inertia": model.final_inertia,
                    "purity": dis.phoneme_purity,
                    "speaker_nmi": dis.speaker_nmi,
                })
            );
            Ok(())
        }
        Cmd::TrainMemory { corpus, quantizer, out, log } => {
            let train = read_corpus(&cfg, corpus, "train")?;
            let test = read_corpus(&cfg, corpus, "test")?;
            let cluster = load_quantizer(quantizer)?;
            let outcome =
                train_memory_asr(&train, &test, &cluster, &cfg.model, &cfg.train_asr, cfg.clusters)?;
            write_logs(&outcome.logs, log.as_deref())?;
            let mut meta = BTreeMap::new();
            meta.insert("stage".to_string(), "memory-asr".to_string());
            meta.insert("model".to_string(), serde_json::to_string(&cfg.model)?);
            meta.insert("final_wer".to_string(), outcome.final_wer.to_string());
            checkpoint::save(out, &outcome.store, &meta)?;
            println!(
                "{}",
                serde_json::json!({
                    "asr_wer": outcome.final_wer,
                    "skipped_infeasible": outcome.skipped_infeasible,
                    "ckpt": out.display().to_string(),
                })
            );
            Ok(())
        }
        Cmd::TrainVsr { corpus, memory: memory_path, out, depth, unfreeze, zero_slots, log } => {
            let train = read_corpus(&cfg, corpus, "train")?;
            let test = read_corpus(&cfg, corpus, "test")?;
            let mut model = cfg.model.clone();
            if let Some(d) = depth {
                model.abm_depth = *d;
            }
            let slots = if *zero_slots {
                Tensor::zeros(&[cfg.clusters, model.d])
            } else {
                let (store, _) = checkpoint::load(memory_path)?;
                store.get(memory::SLOTS_NAME)?.clone()
            };
            let outcome = train_vsr(&train, &test, slots, &model, &cfg.train_vsr, !*unfreeze)?;
            write_logs(&outcome.logs, log.as_deref())?;
            let mut meta = BTreeMap::new();
            meta.insert("stage".to_string(), "vsr".to_string());
            meta.insert("model".to_string(), serde_json::to_string(&model)?);
            meta.insert("final_wer".to_string(), outcome.final_wer.to_string());
            checkpoint::save(out, &outcome.store, &meta)?;
            println!(
                "{}",
                serde_json::json!({
                    "vsr_wer": outcome.final_wer,
                    "abm_depth": model.abm_depth,
                    "skipped_infeasible": outcome.skipped_infeasible,
                    "ckpt": out.display().to_string(),
                })
            );
            Ok(())
        }
        Cmd::Eval { corpus, ckpt, quantizer } => {
            let test = read_corpus(&cfg, corpus, "test")?;
            let (store, meta) = checkpoint::load(ckpt)?;
            let stage = meta
                .get("stage")
                .ok_or_else(|| AkvsrError::Integrity("checkpoint has no stage metadata".into()))?;
            let model: trainer::ModelConfig = serde_json::from_str(
                meta.get("model")
                    .ok_or_else(|| AkvsrError::Integrity("checkpoint has no model metadata".into()))?,
            )?;
            let wer = match stage.as_str() {
                "memory-asr" => {
                    let q = quantizer.as_ref().ok_or_else(|| {
                        AkvsrError::Config("evaluating an ASR checkpoint needs --quantizer".into())
                    })?;
                    eval_asr_wer(&store, &load_quantizer(q)?, &model, &test)?
                }
                "vsr" => eval_vsr_wer(&store, &model, &test)?,
                other => {
                    return Err(AkvsrError::Integrity(format!("unknown checkpoint stage {other:?}")))
                }
            };
            println!("{}", serde_json::json!({ "stage": stage, "wer": wer, "samples": test.len() }));
            Ok(())
        }
        Cmd::Ablate { axis, values, seeds, out } => {
            let axis = AblationAxis::parse(axis)?;
            let rows = run_ablation(axis, values, seeds, &cfg)?;
            let csv = ablation_csv(&rows);
            std::fs::write(out, &csv).map_err(|e| AkvsrError::File {
                path: out.display().to_string(),
                source: e,
            })?;
            print!("{csv}");
            Ok(())
        }
        Cmd::Gradcheck => gradcheck_suite(),
        Cmd::Pipeline { baseline, out } => {
            let outcome = run_pipeline(&cfg, *baseline)?;
            let text = serde_json::to_string_pretty(&outcome.report)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(dir).map_err(|e| AkvsrError::File {
                    path: dir.display().to_string(),
                    source: e,
                })?;
                let mut meta = BTreeMap::new();
                meta.insert("stage".to_string(), "memory-asr".to_string());
                meta.insert("model".to_string(), serde_json::to_string(&cfg.model)?);
                checkpoint::save(&dir.join("asr.ckpt.json"), &outcome.asr_store, &meta)?;
                meta.insert("stage".to_string(), "vsr".to_string());
                checkpoint::save(&dir.join("vsr.ckpt.json"), &outcome.vsr_store, &meta)?;
                if let Some(base) = &outcome.baseline_store {
                    let mut base_model = cfg.model.clone();
                    base_model.abm_depth = 0;
                    meta.insert("model".to_string(), serde_json::to_string(&base_model)?);
                    checkpoint::save(&dir.join("vsr_baseline.ckpt.json"), base, &meta)?;
                }
                std::fs::write(dir.join("report.json"), &text).map_err(|e| AkvsrError::File {
                    path: dir.display().to_string(),
                    source: e,
                })?;
            }
            println!("{text}");
            Ok(())
        }
    }
}

/// Quick finite-difference checks over every differentiable block; prints
/// one JSON line per component and fails if any block exceeds tolerance.
fn gradcheck_suite() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD5);
    let mut failures = 0;
    let mut report = |name: &str, r: &akvsr::autodiff::GradCheckReport| {
        let ok = r.passed();
        if !ok {
            failures += 1;
        }
        println!(
            "{}",
            serde_json::json!({ "component": name, "max_rel_error": r.max_rel_error(), "passed": ok })
        );
    };

    // encoder block
    let enc_cfg = seqnet::EncoderConfig { d: 8, heads: 2, ff: 8, layers: 1, use_pos: true };
    let mut store = ParamStore::new();
    seqnet::init_encoder(&mut store, "enc", &enc_cfg, &mut rng);
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let r = check_store(&store, 1e-4, |lv| {
        Ok(seqnet::encode(lv, "enc", &enc_cfg, &Var::constant(x.clone()))?.sum_all())
    })?;
    report("encoder", &r);

    // injection stack over memory slots
    let abm_cfg = abm::AbmConfig { d: 8, d_k: 8, d_v: 8, heads: 2, tau: None, depth: 2 };
    let mut store = ParamStore::new();
    abm::init_abm(&mut store, &abm_cfg, &mut rng);
    store.insert(memory::SLOTS_NAME, memory::init_memory(4, 8, 1)?);
    let f_v = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let r = check_store(&store, 1e-4, |lv| {
        let slots = lv.get(memory::SLOTS_NAME);
        Ok(abm::forward(lv, &abm_cfg, &Var::constant(f_v.clone()), &slots)?.sum_all())
    })?;
    report("abm", &r);

    // decoder with teacher forcing
    let model = trainer::ModelConfig {
        d: 8,
        heads: 2,
        ff: 8,
        visual_layers: 1,
        context_layers: 1,
        decoder_layers: 1,
        abm_depth: 0,
        abm_heads: 2,
        d_k: 8,
        d_v: 8,
        tau: None,
        phonemes: 3,
    };
    let vocab = model.vocab();
    let dec_cfg = seqnet::DecoderConfig { d: 8, heads: 2, ff: 8, layers: 1, vocab };
    let mut store = ParamStore::new();
    seqnet::init_decoder(&mut store, "dec", &dec_cfg, &mut rng);
    let enc = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let target = vec![vocab.token_of_phoneme(1), vocab.token_of_phoneme(0), vocab.eos()];
    let r = check_store(&store, 1e-4, |lv| {
        trainer::attention_loss(lv, "dec", &dec_cfg, &Var::constant(enc.clone()), &target)
    })?;
    report("decoder", &r);

    // alignment-free loss through a projection
    let mut store = ParamStore::new();
    store.insert("proj", Tensor::randn(&[8, vocab.size()], 0.5, &mut rng));
    let feats = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let ctc_target = vec![vocab.token_of_phoneme(0), vocab.token_of_phoneme(2)];
    let r = check_store(&store, 1e-4, |lv| {
        let logits = Var::constant(feats.clone()).matmul(&lv.get("proj"))?;
        match ctc_loss(&logits.log_softmax_rows()?, &ctc_target)? {
            CtcLoss::Loss(l) => Ok(l),
            CtcLoss::Infeasible => Err(AkvsrError::Contract("unexpectedly infeasible".into())),
        }
    })?;
    report("ctc", &r);

    if failures > 0 {
        Err(AkvsrError::Contract(format!("{failures} gradient check(s) failed")))
    } else {
        Ok(())
    }
}

fn check_store(
    store: &ParamStore,
    tol: f64,
    f: impl Fn(&Leaves) -> Result<Var>,
) -> Result<akvsr::autodiff::GradCheckReport> {
    let params: Vec<(String, Tensor)> = store
        .tensors()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    grad_check(
        &|vars| {
            let map: BTreeMap<String, Var> =
                names.iter().cloned().zip(vars.iter().cloned()).collect();
            f(&Leaves::new(&map))
        },
        &params,
        1e-5,
        tol,
    )
}
