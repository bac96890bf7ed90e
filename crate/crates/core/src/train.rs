//! Shared minibatch loop: per-epoch shuffling, loss logging and divergence
//! handling for the three trainers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's steps of each loss component.
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    /// Set when training stopped on a non-finite loss or gradient; the
    /// parameters then hold the last finite state.
    pub diverged: Option<Divergence>,
}

impl TrainLog {
    pub fn last(&self, key: &str) -> Option<f64> {
        self.epochs.last().and_then(|e| e.losses.get(key).copied())
    }
}

/// Loss components of one optimizer step; `"loss"` is the optimized total.
pub(crate) type StepLosses = Vec<(&'static str, f64)>;

pub(crate) fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Runs `epochs` passes over `n` samples in shuffled minibatches.
///
/// `step` receives the batch indices and the global step number and performs
/// one optimizer update. A non-finite value stops training with the
/// divergence recorded; any other error propagates.
pub(crate) fn run_epochs<F>(n: usize, batch: usize, epochs: usize, rng: &mut ChaCha8Rng, tag: &str, mut step: F) -> Result<TrainLog>
where
    F: FnMut(&[usize], usize) -> Result<StepLosses>,
{
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            let losses = match step(chunk, log.steps) {
                Ok(l) => l,
                Err(Error::NonFinite { .. } | Error::NonFiniteGradient { .. }) => {
                    log.diverged = Some(Divergence { step: log.steps, loss: f64::NAN });
                    log::warn!("{tag}: diverged at step {}", log.steps);
                    return Ok(log);
                }
                Err(e) => return Err(e),
            };
            let total = losses.iter().find(|(k, _)| *k == "loss").map_or(f64::NAN, |(_, v)| *v);
            if !total.is_finite() {
                log.diverged = Some(Divergence { step: log.steps, loss: total });
                log::warn!("{tag}: diverged at step {} (loss {total})", log.steps);
                return Ok(log);
            }
            for (k, v) in losses {
                *sums.entry(k.to_string()).or_insert(0.0) += v;
            }
            count += 1;
            log.steps += 1;
        }
        let losses: BTreeMap<String, f64> = sums.into_iter().map(|(k, v)| (k, v / count as f64)).collect();
        log::info!("{tag} epoch {epoch}: {losses:?}");
        log.epochs.push(EpochLog { epoch, losses });
    }
    Ok(log)
}
