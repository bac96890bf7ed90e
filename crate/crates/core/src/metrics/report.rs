use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{bleu_n, dtw_distance, rouge_l, Translator};
use crate::error::{Error, Result};
use crate::pose::{normalize_pose, SignTextPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge: f64,
    pub dtw: f64,
}

/// Corpus means and the per-sample breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge: f64,
    pub dtw: f64,
    pub samples: Vec<SampleScores>,
}

/// Scores generated sequences against references with the same ids.
///
/// Both sides are normalized before DTW; text metrics compare the
/// translator's output for the generated pose with the reference text.
pub fn evaluate_dataset(generated: &[SignTextPair], refs: &[SignTextPair], translator: &dyn Translator) -> Result<EvalReport> {
    if generated.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    if generated.len() != refs.len() {
        return Err(Error::Mismatch(format!("{} generated samples but {} references", generated.len(), refs.len())));
    }
    let by_id: HashMap<&str, &SignTextPair> = refs.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut samples = Vec::with_capacity(generated.len());
    for g in generated {
        let r = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::Sample { id: g.id.clone(), msg: "no reference with this id".into() })?;
        let hyp = translator.translate(&g.id, &g.pose)?;
        let dtw = dtw_distance(&normalize_pose(&g.pose)?, &normalize_pose(&r.pose)?)?;
        samples.push(SampleScores {
            id: g.id.clone(),
            hypothesis: hyp.join(" "),
            reference: r.sentence(),
            bleu1: bleu_n(&hyp, &r.text, 1)?,
            bleu2: bleu_n(&hyp, &r.text, 2)?,
            bleu3: bleu_n(&hyp, &r.text, 3)?,
            bleu4: bleu_n(&hyp, &r.text, 4)?,
            rouge: rouge_l(&hyp, &r.text)?,
            dtw,
        });
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleScores) -> f64| samples.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        bleu1: mean(|s| s.bleu1),
        bleu2: mean(|s| s.bleu2),
        bleu3: mean(|s| s.bleu3),
        bleu4: mean(|s| s.bleu4),
        rouge: mean(|s| s.rouge),
        dtw: mean(|s| s.dtw),
        samples,
    })
}
