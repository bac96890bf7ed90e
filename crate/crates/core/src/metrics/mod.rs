//! DTW pose error, BLEU-n and ROUGE-L, back-translation and evaluation reports.

mod report;
mod translate;

pub use report::{evaluate_dataset, EvalReport, SampleScores};
pub use translate::{FileBacked, SyntheticOracle, Translator};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pose::PoseSequence;

/// Mean over keypoints of the per-joint Euclidean distance, each clamped to 1.
pub fn frame_cost(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let k = a.len() / dim;
    a.chunks(dim)
        .zip(b.chunks(dim))
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt().min(1.0))
        .sum::<f64>()
        / k as f64
}

/// Dynamic time warping over a precomputed `n × m` cost matrix (row-major).
///
/// Among minimum-cost alignments the shortest path wins; the result is the
/// path cost divided by its length.
pub fn dtw_from_costs(cost: &[f64], n: usize, m: usize) -> f64 {
    assert!(n > 0 && m > 0 && cost.len() == n * m);
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let prev = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                let mut consider = |c: (f64, usize)| {
                    if c.0 < best.0 || (c.0 == best.0 && c.1 < best.1) {
                        best = c;
                    }
                };
                if i > 0 {
                    consider(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    consider(acc[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    consider(acc[(i - 1) * m + j - 1]);
                }
                best
            };
            acc[i * m + j] = (prev.0 + cost[i * m + j], prev.1 + 1);
        }
    }
    let (total, len) = acc[n * m - 1];
    total / len as f64
}

/// Length-normalized DTW between two pose sequences, in `[0, 1]`.
pub fn dtw_distance(gen: &PoseSequence, reference: &PoseSequence) -> Result<f64> {
    let (dg, dr) = (gen.dims(), reference.dims());
    if dg.keypoints != dr.keypoints || dg.dim != dr.dim {
        return Err(Error::invalid("sequences have different keypoint layouts"));
    }
    let (n, m) = (gen.len(), reference.len());
    let mut cost = Vec::with_capacity(n * m);
    for a in gen.frames() {
        for b in reference.frames() {
            cost.push(frame_cost(a, b, dg.dim));
        }
    }
    Ok(dtw_from_costs(&cost, n, m))
}

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= k {
        for g in tokens.windows(k) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped k-gram matches and the candidate's k-gram total.
fn modified_precision(candidate: &[String], reference: &[String], k: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, k);
    let refc = ngram_counts(reference, k);
    let matched = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(k - 1))
}

/// Sentence BLEU with uniform weights over 1..=n grams and brevity penalty.
///
/// A zero precision for k ≥ 2 is smoothed to `(0 + 1) / (total + 1)`;
/// an empty candidate scores 0.
pub fn bleu_n(candidate: &[String], reference: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("BLEU order must be at least 1"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (matched, total) = modified_precision(candidate, reference, k);
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if k >= 2 {
            1.0 / (total + 1) as f64
        } else {
            return Ok(0.0);
        };
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = (1.0 - r / c).exp().min(1.0);
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("ROUGE-L needs a nonempty reference"));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}
