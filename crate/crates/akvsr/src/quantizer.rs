//! Frame-wise audio quantization: k-means (k-means++ init, Lloyd
//! iterations, empty-cluster repair) fitted on the single-speaker split,
//! plus the purity / speaker-leakage diagnostics.

use crate::corpus::SyntheticSample;
use crate::error::{AkvsrError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClusterModel {
    /// `[N x d_a]` centroids.
    pub centroids: Tensor,
    pub n: usize,
    pub iterations: usize,
    pub final_inertia: f64,
    /// Inertia after each Lloyd iteration (non-increasing).
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Tensor, point: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = sq_dist(centroids.row(c), point);
        // strict < keeps ties on the lowest centroid index
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Concatenated audio frames from a list of samples, `[M x d_a]`.
pub fn stack_audio_frames(samples: &[SyntheticSample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(AkvsrError::Data("no samples to stack".into()));
    }
    let d = samples[0].audio.cols();
    let m: usize = samples.iter().map(|s| s.audio.rows()).sum();
    let mut out = Tensor::zeros(&[m, d]);
    let mut row = 0;
    for s in samples {
        for t in 0..s.audio.rows() {
            for j in 0..d {
                out.set(row, j, s.audio.at(t, j));
            }
            row += 1;
        }
    }
    Ok(out)
}

pub fn fit_kmeans(features: &Tensor, n: usize, max_iter: usize, seed: u64) -> Result<ClusterModel> {
    let m = features.rows();
    let d = features.cols();
    if n < 1 {
        return Err(AkvsrError::Config("cluster count must be >= 1".into()));
    }
    if m < n {
        return Err(AkvsrError::Data(format!(
            "need at least as many points as clusters: M={m} < N={n}"
        )));
    }
    if max_iter < 1 {
        return Err(AkvsrError::Config("maxIter must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x6C62_272E_07BB_0142).wrapping_add(3));

    // k-means++ seeding
    let mut centroids = Tensor::zeros(&[n, d]);
    let first = rng.gen_range(0..m);
    for j in 0..d {
        centroids.set(0, j, features.at(first, j));
    }
    let mut min_d2: Vec<f64> = (0..m)
        .map(|i| sq_dist(features.row(i), centroids.row(0)))
        .collect();
    for c in 1..n {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..m)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = m - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        for j in 0..d {
            centroids.set(c, j, features.at(pick, j));
        }
        for i in 0..m {
            let dd = sq_dist(features.row(i), centroids.row(c));
            if dd < min_d2[i] {
                min_d2[i] = dd;
            }
        }
    }

    // Lloyd iterations to an assignment fixpoint
    let mut assign = vec![usize::MAX; m];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; m];
        for i in 0..m {
            let (c, dd) = nearest(&centroids, features.row(i));
            if assign[i] != c {
                changed = true;
                assign[i] = c;
            }
            dists[i] = dd;
        }
        // empty-cluster repair: seize the point farthest from its centroid
        let mut counts = vec![0usize; n];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..n {
            while counts[c] == 0 {
                let victim = (0..m)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap())
                    .ok_or_else(|| AkvsrError::Data("cannot repair empty cluster".into()))?;
                counts[assign[victim]] -= 1;
                assign[victim] = c;
                counts[c] += 1;
                dists[victim] = 0.0;
                changed = true;
            }
        }
        // mean update
        let mut sums = Tensor::zeros(&[n, d]);
        for i in 0..m {
            for j in 0..d {
                let v = sums.at(assign[i], j) + features.at(i, j);
                sums.set(assign[i], j, v);
            }
        }
        for c in 0..n {
            for j in 0..d {
                centroids.set(c, j, sums.at(c, j) / counts[c] as f64);
            }
        }
        let inertia: f64 = (0..m)
            .map(|i| sq_dist(features.row(i), centroids.row(assign[i])))
            .sum();
        inertia_history.push(inertia);
        if !changed {
            break;
        }
    }
    let final_inertia = *inertia_history.last().unwrap();
    Ok(ClusterModel {
        centroids,
        n,
        iterations,
        final_inertia,
        inertia_history,
    })
}

/// Frame-wise argmin-distance labels, ties to the lowest centroid index.
pub fn quantize(model: &ClusterModel, features: &Tensor) -> Result<Vec<usize>> {
    if features.cols() != model.centroids.cols() {
        return Err(AkvsrError::Dimension(format!(
            "feature dim {} does not match centroid dim {}",
            features.cols(),
            model.centroids.cols()
        )));
    }
    Ok((0..features.rows())
        .map(|i| nearest(&model.centroids, features.row(i)).0)
        .collect())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Disentanglement {
    pub phoneme_purity: f64,
    pub speaker_nmi: f64,
    pub frames: usize,
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Purity of cluster labels against per-frame phoneme alignments, and
/// normalized mutual information (geometric-mean normalization) between
/// cluster labels and speaker ids.
pub fn purity_and_leakage(
    model: &ClusterModel,
    samples: &[SyntheticSample],
    n_phonemes: usize,
    n_speakers: usize,
) -> Result<Disentanglement> {
    if samples.is_empty() {
        return Err(AkvsrError::Data("empty split".into()));
    }
    let n = model.n;
    let mut cluster_phoneme = vec![vec![0usize; n_phonemes]; n];
    let mut cluster_speaker = vec![vec![0usize; n_speakers]; n];
    let mut total = 0usize;
    for s in samples {
        let labels = quantize(model, &s.audio)?;
        for (t, &c) in labels.iter().enumerate() {
            cluster_phoneme[c][s.align[t]] += 1;
            cluster_speaker[c][s.utterance.speaker_id] += 1;
            total += 1;
        }
    }
    let purity: f64 = cluster_phoneme
        .iter()
        .map(|row| *row.iter().max().unwrap() as f64)
        .sum::<f64>()
        / total as f64;

    let cluster_counts: Vec<usize> = cluster_speaker.iter().map(|r| r.iter().sum()).collect();
    let mut speaker_counts = vec![0usize; n_speakers];
    for row in &cluster_speaker {
        for (s, &c) in row.iter().enumerate() {
            speaker_counts[s] += c;
        }
    }
    let h_c = entropy(&cluster_counts, total);
    let h_s = entropy(&speaker_counts, total);
    let mut mi = 0.0;
    for c in 0..n {
        for s in 0..n_speakers {
            let joint = cluster_speaker[c][s];
            if joint == 0 {
                continue;
            }
            let p_joint = joint as f64 / total as f64;
            let p_c = cluster_counts[c] as f64 / total as f64;
            let p_s = speaker_counts[s] as f64 / total as f64;
            mi += p_joint * (p_joint / (p_c * p_s)).ln();
        }
    }
    let nmi = if h_c > 0.0 && h_s > 0.0 {
        mi / (h_c * h_s).sqrt()
    } else {
        0.0
    };
    Ok(Disentanglement {
        phoneme_purity: purity,
        speaker_nmi: nmi.max(0.0),
        frames: total,
    })
}
