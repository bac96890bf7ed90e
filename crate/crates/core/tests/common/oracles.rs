//! Independent reference implementations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use t2sd_core::metrics::frame_cost;
use t2sd_core::pose::{PoseDims, PoseSequence};

/// Enumerates every monotone alignment path and keeps the lowest
/// (cost, length) pair.
pub fn brute_force_dtw(a: &PoseSequence, b: &PoseSequence) -> f64 {
    fn walk(a: &PoseSequence, b: &PoseSequence, i: usize, j: usize, cost: f64, len: usize, best: &mut (f64, usize)) {
        let cost = cost + frame_cost(a.frame(i), b.frame(j), a.dims().dim);
        let len = len + 1;
        if i + 1 == a.len() && j + 1 == b.len() {
            if cost < best.0 || (cost == best.0 && len < best.1) {
                *best = (cost, len);
            }
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, cost, len, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, cost, len, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, cost, len, best);
        }
    }
    let mut best = (f64::INFINITY, 0);
    walk(a, b, 0, 0, 0.0, 0, &mut best);
    best.0 / best.1 as f64
}

pub fn random_seq(rng: &mut ChaCha8Rng, max_len: usize) -> PoseSequence {
    let dims = PoseDims::new(3, 2, 8).unwrap();
    let len = rng.random_range(1..=max_len);
    PoseSequence::new(dims, (0..len * 6).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap()
}

/// Mean and population variance.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}
