use std::collections::HashMap;
use std::path::Path;

use super::{dtw_from_costs, frame_cost};
use crate::error::{Error, Result};
use crate::pose::{load_dataset, PoseSequence, SignTextPair, SyntheticGrammar};

/// Back-translation from a pose sequence to text.
pub trait Translator {
    fn translate(&self, id: &str, pose: &PoseSequence) -> Result<Vec<String>>;
}

/// Decodes a sequence against a grammar's motif table: the sequence is cut
/// into segments of roughly one motif length each, and every segment is
/// labeled with its DTW-nearest motif.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    grammar: SyntheticGrammar,
    /// Allowed deviation of a segment length from its motif length.
    pub slack: f64,
}

impl SyntheticOracle {
    pub fn new(grammar: SyntheticGrammar) -> Self {
        SyntheticOracle { grammar, slack: 0.25 }
    }

    fn decode(&self, pose: &PoseSequence, lengths: impl Fn(usize) -> (usize, usize)) -> Option<Vec<String>> {
        let n = pose.len();
        let d = pose.dims().dim;
        let motifs = self.grammar.motifs();
        // costs[w][i * m + j]: frame i of the input against frame j of motif w
        let costs: Vec<Vec<f64>> = motifs
            .iter()
            .map(|m| pose.frames().flat_map(|a| m.frames().map(move |b| frame_cost(a, b, d))).collect())
            .collect();
        let mut best = vec![(f64::INFINITY, 0usize, 0usize); n + 1];
        best[0].0 = 0.0;
        for end in 1..=n {
            for (w, m) in motifs.iter().enumerate() {
                let ml = m.len();
                let (lo, hi) = lengths(ml);
                for len in lo.max(1)..=hi.min(end) {
                    let start = end - len;
                    if !best[start].0.is_finite() {
                        continue;
                    }
                    let block: Vec<f64> = (start..end).flat_map(|i| costs[w][i * ml..(i + 1) * ml].iter().copied()).collect();
                    let total = best[start].0 + len as f64 * dtw_from_costs(&block, len, ml);
                    if total < best[end].0 {
                        best[end] = (total, start, w);
                    }
                }
            }
        }
        if !best[n].0.is_finite() {
            return None;
        }
        let mut words = Vec::new();
        let mut end = n;
        while end > 0 {
            let (_, start, w) = best[end];
            words.push(self.grammar.vocabulary()[w].clone());
            end = start;
        }
        words.reverse();
        Some(words)
    }
}

impl Translator for SyntheticOracle {
    fn translate(&self, _id: &str, pose: &PoseSequence) -> Result<Vec<String>> {
        let slack = self.slack;
        let strict = self.decode(pose, |ml| {
            let lo = ((1.0 - slack) * ml as f64).ceil() as usize;
            let hi = ((1.0 + slack) * ml as f64).floor() as usize;
            (lo, hi)
        });
        // sequences too short for any admissible segmentation fall back to free lengths
        Ok(strict.or_else(|| self.decode(pose, |_| (1, pose.len()))).unwrap_or_default())
    }
}

/// Translations produced elsewhere, looked up by sample id.
#[derive(Debug, Clone, Default)]
pub struct FileBacked {
    texts: HashMap<String, Vec<String>>,
}

impl FileBacked {
    pub fn from_pairs(pairs: &[SignTextPair]) -> Self {
        FileBacked { texts: pairs.iter().map(|p| (p.id.clone(), p.text.clone())).collect() }
    }

    /// Reads `{"id": .., "text": ..}` JSON lines, or a dataset file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Ok(ds) = load_dataset(path) {
            return Ok(Self::from_pairs(&ds.pairs));
        }
        #[derive(serde::Deserialize)]
        struct Entry {
            id: String,
            text: String,
        }
        let mut texts = HashMap::new();
        for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: Entry = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            texts.insert(e.id, e.text.split_whitespace().map(str::to_owned).collect());
        }
        Ok(FileBacked { texts })
    }
}

impl Translator for FileBacked {
    fn translate(&self, id: &str, _pose: &PoseSequence) -> Result<Vec<String>> {
        self.texts
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Sample { id: id.to_owned(), msg: "no translation available".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{generate_synthetic, GrammarConfig};

    #[test]
    fn oracle_recovers_clean_sentences() {
        let g = GrammarConfig { noise_std: 0.0, ..Default::default() }.build().unwrap();
        let oracle = SyntheticOracle::new(g.clone());
        for p in generate_synthetic(&g, 30, 11).unwrap() {
            assert_eq!(oracle.translate(&p.id, &p.pose).unwrap(), p.text);
        }
    }

    #[test]
    fn oracle_tolerates_default_noise() {
        let g = GrammarConfig::default().build().unwrap();
        let oracle = SyntheticOracle::new(g.clone());
        for p in generate_synthetic(&g, 20, 12).unwrap() {
            assert_eq!(oracle.translate(&p.id, &p.pose).unwrap(), p.text);
        }
    }

    #[test]
    fn oracle_handles_short_input() {
        let g = GrammarConfig::default().build().unwrap();
        let oracle = SyntheticOracle::new(g.clone());
        let m = &g.motifs()[3];
        let short = PoseSequence::new(m.dims(), m.data()[..5 * m.dims().frame_len()].to_vec()).unwrap();
        assert_eq!(oracle.translate("x", &short).unwrap().len(), 1);
    }

    #[test]
    fn file_backed_looks_up_by_id() {
        let g = GrammarConfig::default().build().unwrap();
        let pairs = generate_synthetic(&g, 3, 1).unwrap();
        let fb = FileBacked::from_pairs(&pairs);
        assert_eq!(fb.translate(&pairs[1].id, &pairs[0].pose).unwrap(), pairs[1].text);
        assert!(fb.translate("missing", &pairs[0].pose).is_err());
    }
}
