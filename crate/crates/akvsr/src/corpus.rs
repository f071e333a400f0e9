//! Synthetic paired audio/visual feature sequences with controllable
//! linguistic, speaker, and noise factors. Audio frames carry phoneme
//! identity plus an additive speaker offset and noise; visual frames carry
//! only viseme identity (several phonemes can share one viseme), so the
//! visual stream is ambiguous by construction and a bigram grammar makes
//! the ambiguity resolvable from context.

use crate::error::{AkvsrError, Result};
use crate::tensor::{gauss, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const MIN_TRANSCRIPT_LEN: usize = 3;
pub const MAX_TRANSCRIPT_LEN: usize = 12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub p: usize,
    pub v: usize,
    pub s: usize,
    pub sigma_audio: f64,
    pub sigma_visual: f64,
    pub speaker_scale: f64,
    pub dur_min: usize,
    pub dur_max: usize,
    pub d_a: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            p: 12,
            v: 6,
            s: 4,
            sigma_audio: 0.1,
            sigma_visual: 0.3,
            speaker_scale: 0.5,
            dur_min: 2,
            dur_max: 4,
            d_a: 32,
            d: 32,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// A degenerate corpus with no noise and no speaker offsets.
    pub fn noiseless() -> Self {
        CorpusConfig {
            sigma_audio: 0.0,
            sigma_visual: 0.0,
            speaker_scale: 0.0,
            ..CorpusConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v >= self.p {
            return Err(AkvsrError::Config("ambiguity requires V < P".into()));
        }
        if self.v < 2 && self.p > 2 {
            // V=1 is allowed only in the minimal P=2 case used by tests
        }
        if self.v < 1 || self.p > 26 {
            return Err(AkvsrError::Config(format!(
                "need 1 <= V < P <= 26, got P={} V={}",
                self.p, self.v
            )));
        }
        if self.sigma_audio < 0.0 || self.sigma_visual < self.sigma_audio {
            return Err(AkvsrError::Config(
                "need sigmaVisual >= sigmaAudio >= 0".into(),
            ));
        }
        if self.dur_min < 2 || self.dur_max < self.dur_min {
            return Err(AkvsrError::Config(
                "need durMin >= 2 and durMax >= durMin".into(),
            ));
        }
        if self.d_a < 8 || self.d < 8 {
            return Err(AkvsrError::Config("need d_a, d >= 8".into()));
        }
        if self.p > self.d_a || self.v > self.d {
            return Err(AkvsrError::Config(
                "orthogonal embeddings need P <= d_a and V <= d".into(),
            ));
        }
        if self.s < 1 {
            return Err(AkvsrError::Config("need at least one speaker".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhonemeInventory {
    pub p: usize,
    pub v: usize,
    /// Total map phoneme -> viseme, `p % V` (balanced when V divides P).
    pub viseme_of: Vec<usize>,
    /// P orthonormal rows in audio-feature space.
    pub audio_embed: Tensor,
    /// V orthonormal rows in visual-feature space.
    pub visual_embed: Tensor,
}

impl PhonemeInventory {
    pub fn symbol(&self, phoneme: usize) -> String {
        ((b'a' + phoneme as u8) as char).to_string()
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize> {
        let b = symbol.as_bytes();
        if b.len() == 1 && (b'a'..b'a' + self.p as u8).contains(&b[0]) {
            Ok((b[0] - b'a') as usize)
        } else {
            Err(AkvsrError::Data(format!("unknown phoneme symbol {symbol:?}")))
        }
    }

    /// Bigram grammar: phoneme p may be followed by p+1 .. p+min(3,V) mod P.
    /// Offsets stay within one viseme period, so phonemes sharing a viseme
    /// (which differ by a multiple of V) have disjoint successor sets and
    /// context disambiguates them.
    pub fn successors(&self, phoneme: usize) -> Vec<usize> {
        let span = self.v.min(3).max(1);
        (1..=span).map(|o| (phoneme + o) % self.p).collect()
    }
}

/// Gram-Schmidt on seeded Gaussian vectors; rows come out orthonormal.
fn orthonormal_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            rows.push(v);
        }
    }
    Tensor::new(vec![n, dim], rows.into_iter().flatten().collect()).unwrap()
}

pub fn make_inventory(p: usize, v: usize, d_a: usize, d: usize, seed: u64) -> Result<PhonemeInventory> {
    if v >= p {
        return Err(AkvsrError::Config("ambiguity requires V < P".into()));
    }
    if p > 26 || v < 1 {
        return Err(AkvsrError::Config(format!("need 1 <= V < P <= 26, got P={p} V={v}")));
    }
    if p > d_a || v > d {
        return Err(AkvsrError::Config("orthogonal embeddings need P <= d_a and V <= d".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1));
    let audio_embed = orthonormal_rows(p, d_a, &mut rng);
    let visual_embed = orthonormal_rows(v, d, &mut rng);
    Ok(PhonemeInventory {
        p,
        v,
        viseme_of: (0..p).map(|ph| ph % v).collect(),
        audio_embed,
        visual_embed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Phoneme indices, length 3..=12, drawn from the bigram grammar.
    pub transcript: Vec<usize>,
    pub speaker_id: usize,
    pub rng_seed: u64,
}

pub fn sample_utterance(
    inventory: &PhonemeInventory,
    n_speakers: usize,
    speaker_id: usize,
    seed: u64,
) -> Result<Utterance> {
    if speaker_id >= n_speakers {
        return Err(AkvsrError::Range(format!(
            "speakerId {speaker_id} out of [0, {n_speakers})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B54A32D192ED03).wrapping_add(7));
    let len = rng.gen_range(MIN_TRANSCRIPT_LEN..=MAX_TRANSCRIPT_LEN);
    let mut transcript = Vec::with_capacity(len);
    transcript.push(rng.gen_range(0..inventory.p));
    while transcript.len() < len {
        let succ = inventory.successors(*transcript.last().unwrap());
        transcript.push(succ[rng.gen_range(0..succ.len())]);
    }
    Ok(Utterance { transcript, speaker_id, rng_seed: seed })
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub utterance: Utterance,
    /// `[T_a x d_a]` audio features.
    pub audio: Tensor,
    /// `[T_v x d]` visual features, `T_a = 2 * T_v`.
    pub visual: Tensor,
    /// Phoneme index per audio frame; metric bookkeeping only, never
    /// exposed to models.
    pub align: Vec<usize>,
}

/// Unit direction per speaker scaled to `speaker_scale`, seeded by the
/// corpus seed alone so every split shares the same speakers.
pub fn speaker_offsets(config: &CorpusConfig) -> Tensor {
    let mut rng =
        ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0xA24BAED4963EE407).wrapping_add(13));
    let mut out = Tensor::zeros(&[config.s, config.d_a]);
    for s in 0..config.s {
        let mut v: Vec<f64> = (0..config.d_a).map(|_| gauss(&mut rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in v.iter_mut() {
            *x = *x / norm * config.speaker_scale;
        }
        for (j, x) in v.iter().enumerate() {
            out.set(s, j, *x);
        }
    }
    out
}

pub fn render(
    utterance: &Utterance,
    inventory: &PhonemeInventory,
    config: &CorpusConfig,
) -> Result<SyntheticSample> {
    config.validate()?;
    let offsets = speaker_offsets(config);
    let mut rng = ChaCha8Rng::seed_from_u64(
        utterance
            .rng_seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(config.seed.wrapping_mul(0x2545F4914F6CDD1D)),
    );
    // Durations first, then noise: keeps frame counts independent of dims.
    let mut durations: Vec<usize> = utterance
        .transcript
        .iter()
        .map(|_| rng.gen_range(config.dur_min..=config.dur_max))
        .collect();
    let total: usize = durations.iter().sum();
    if total % 2 == 1 {
        *durations.last_mut().unwrap() += 1;
    }
    let t_a: usize = durations.iter().sum();
    let t_v = t_a / 2;

    let mut align = Vec::with_capacity(t_a);
    for (ph, &dur) in utterance.transcript.iter().zip(&durations) {
        align.extend(std::iter::repeat(*ph).take(dur));
    }

    let mut audio = Tensor::zeros(&[t_a, config.d_a]);
    for (t, &ph) in align.iter().enumerate() {
        for j in 0..config.d_a {
            let noise = if config.sigma_audio > 0.0 {
                gauss(&mut rng) * config.sigma_audio
            } else {
                0.0
            };
            audio.set(
                t,
                j,
                inventory.audio_embed.at(ph, j) + offsets.at(utterance.speaker_id, j) + noise,
            );
        }
    }
    let mut visual = Tensor::zeros(&[t_v, config.d]);
    for t in 0..t_v {
        let vis = inventory.viseme_of[align[2 * t]];
        for j in 0..config.d {
            let noise = if config.sigma_visual > 0.0 {
                gauss(&mut rng) * config.sigma_visual
            } else {
                0.0
            };
            visual.set(t, j, inventory.visual_embed.at(vis, j) + noise);
        }
    }
    Ok(SyntheticSample {
        id: String::new(),
        utterance: utterance.clone(),
        audio,
        visual,
        align,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Quantfit,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Quantfit => "quantfit",
        }
    }

    fn seed_base(self) -> u64 {
        match self {
            Split::Train => 0x1000_0000,
            Split::Test => 0x2000_0000,
            Split::Quantfit => 0x3000_0000,
        }
    }
}

/// Renders one split in memory. Train and test cycle through all speakers;
/// quantfit uses speaker 0 only (the single-speaker quantizer-fitting set).
pub fn generate_split(
    config: &CorpusConfig,
    inventory: &PhonemeInventory,
    split: Split,
    count: usize,
) -> Result<Vec<SyntheticSample>> {
    if count < 1 {
        return Err(AkvsrError::Config(format!(
            "{} split needs at least one sample",
            split.name()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let speaker = match split {
            Split::Quantfit => 0,
            _ => i % config.s,
        };
        let seed = config
            .seed
            .wrapping_mul(0x517C_C1B7_2722_0A95)
            .wrapping_add(split.seed_base() + i as u64);
        let utt = sample_utterance(inventory, config.s, speaker, seed)?;
        let mut sample = render(&utt, inventory, config)?;
        sample.id = format!("{}-{:06}", split.name(), i);
        out.push(sample);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    speaker: usize,
    transcript: Vec<String>,
    audio: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
    align: Vec<usize>,
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn write_split(path: &Path, samples: &[SyntheticSample], inv: &PhonemeInventory) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| AkvsrError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            speaker: s.utterance.speaker_id,
            transcript: s.utterance.transcript.iter().map(|&p| inv.symbol(p)).collect(),
            audio: to_rows(&s.audio),
            visual: to_rows(&s.visual),
            align: s.align.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| AkvsrError::File {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn read_split(path: &Path, inv: &PhonemeInventory) -> Result<Vec<SyntheticSample>> {
    let file = std::fs::File::open(path).map_err(|e| AkvsrError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| AkvsrError::File {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        let transcript = rec
            .transcript
            .iter()
            .map(|s| inv.index_of(s))
            .collect::<Result<Vec<_>>>()?;
        let t_a = rec.audio.len();
        let d_a = rec.audio.first().map(|r| r.len()).unwrap_or(0);
        let t_v = rec.visual.len();
        let d = rec.visual.first().map(|r| r.len()).unwrap_or(0);
        out.push(SyntheticSample {
            id: rec.id,
            utterance: Utterance {
                transcript,
                speaker_id: rec.speaker,
                rng_seed: 0,
            },
            audio: Tensor::new(vec![t_a, d_a], rec.audio.into_iter().flatten().collect())?,
            visual: Tensor::new(vec![t_v, d], rec.visual.into_iter().flatten().collect())?,
            align: rec.align,
        });
    }
    Ok(out)
}

/// Writes train/test/quantfit JSONL files under `out_dir`.
pub fn generate_corpus(
    config: &CorpusConfig,
    out_dir: &Path,
    n_train: usize,
    n_test: usize,
    single_speaker_n: usize,
) -> Result<(usize, usize, usize)> {
    config.validate()?;
    let inv = make_inventory(config.p, config.v, config.d_a, config.d, config.seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| AkvsrError::File {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    for (split, count) in [
        (Split::Train, n_train),
        (Split::Test, n_test),
        (Split::Quantfit, single_speaker_n),
    ] {
        let samples = generate_split(config, &inv, split, count)?;
        write_split(&out_dir.join(format!("{}.jsonl", split.name())), &samples, &inv)?;
    }
    Ok((n_train, n_test, single_speaker_n))
}
