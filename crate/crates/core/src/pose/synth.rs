use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::skeleton::{body, face, BODY, FACE, HAND_POINTS, LEFT_HAND, RIGHT_HAND};
use super::{mean_keypoint_distance, PoseDims, PoseSequence, SignTextPair, DEFAULT_KEYPOINTS};
use crate::error::{Error, Result};

pub const DEFAULT_VOCABULARY: [&str; 8] = ["hello", "thanks", "rain", "sun", "wind", "today", "tomorrow", "cold"];

/// Construction parameters for the procedural motif grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub vocabulary: Vec<String>,
    pub motif_frames: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub noise_std: f64,
    #[serde(rename = "K")]
    pub keypoints: usize,
    pub d: usize,
    #[serde(rename = "U")]
    pub max_len: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            vocabulary: DEFAULT_VOCABULARY.iter().map(|w| w.to_string()).collect(),
            motif_frames: 16,
            min_words: 2,
            max_words: 5,
            noise_std: 0.02,
            keypoints: DEFAULT_KEYPOINTS,
            d: 2,
            max_len: super::DEFAULT_MAX_LEN,
        }
    }
}

impl GrammarConfig {
    pub fn dims(&self) -> Result<PoseDims> {
        PoseDims::new(self.keypoints, self.d, self.max_len)
    }

    pub fn build(&self) -> Result<SyntheticGrammar> {
        SyntheticGrammar::procedural(self)
    }
}

/// Vocabulary words, each signed by a fixed pose motif. A sentence is a set
/// of distinct words in vocabulary order; its pose is the concatenation of
/// the word motifs plus Gaussian jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGrammar {
    dims: PoseDims,
    vocabulary: Vec<String>,
    motifs: Vec<PoseSequence>,
    sentence_len: (usize, usize),
    noise_std: f64,
}

impl SyntheticGrammar {
    pub fn new(
        vocabulary: Vec<String>,
        motifs: Vec<PoseSequence>,
        sentence_len: (usize, usize),
        noise_std: f64,
    ) -> Result<Self> {
        if vocabulary.is_empty() || vocabulary.len() != motifs.len() {
            return Err(Error::invalid("every vocabulary word needs exactly one motif"));
        }
        let mut sorted = vocabulary.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != vocabulary.len() || vocabulary.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(Error::invalid("vocabulary words must be distinct single tokens"));
        }
        let (lo, hi) = sentence_len;
        if lo == 0 || lo > hi || hi > vocabulary.len() {
            return Err(Error::invalid(format!(
                "sentence length range {lo}..={hi} does not fit a vocabulary of {}",
                vocabulary.len()
            )));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and non-negative"));
        }
        let dims = motifs[0].dims();
        if motifs.iter().any(|m| m.dims() != dims || !(8..=24).contains(&m.len())) {
            return Err(Error::invalid("motifs must share dims and span 8 to 24 frames"));
        }
        let grammar = SyntheticGrammar { dims, vocabulary, motifs, sentence_len, noise_std };
        let sep = grammar.min_separation();
        if grammar.vocabulary.len() > 1 && sep <= 4.0 * noise_std {
            return Err(Error::invalid(format!(
                "motifs are not distinguishable: min separation {sep:.4} <= 4 * noise_std"
            )));
        }
        Ok(grammar)
    }

    /// Procedurally drawn motifs on the 79-keypoint layout.
    ///
    /// Every keypoint stays within radius 0.5 of the body root and two
    /// keypoints sit at exactly (0, ±0.5), so each motif frame already has
    /// unit extent.
    pub fn procedural(cfg: &GrammarConfig) -> Result<Self> {
        let dims = cfg.dims()?;
        if dims.keypoints != DEFAULT_KEYPOINTS {
            return Err(Error::invalid("procedural motifs need the 79-keypoint layout"));
        }
        if !(8..=24).contains(&cfg.motif_frames) {
            return Err(Error::invalid("motif length must be 8 to 24 frames"));
        }
        let n = cfg.vocabulary.len();
        let motifs = (0..n)
            .map(|i| PoseSequence::new(dims, motif_frames(dims, i, n, cfg.motif_frames)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cfg.vocabulary.clone(), motifs, (cfg.min_words, cfg.max_words), cfg.noise_std)
    }

    pub fn dims(&self) -> PoseDims {
        self.dims
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn motifs(&self) -> &[PoseSequence] {
        &self.motifs
    }

    pub fn motif(&self, word: &str) -> Option<&PoseSequence> {
        self.word_index(word).map(|i| &self.motifs[i])
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.vocabulary.iter().position(|w| w == word)
    }

    pub fn sentence_len(&self) -> (usize, usize) {
        self.sentence_len
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Smallest mean keypoint distance between two motifs, frames matched by
    /// relative position.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.motifs.len() {
            for j in i + 1..self.motifs.len() {
                best = best.min(motif_distance(&self.motifs[i], &self.motifs[j]));
            }
        }
        best
    }

    /// Noise-free pose of a sentence.
    pub fn render(&self, words: &[String]) -> Result<PoseSequence> {
        let mut data = Vec::new();
        for w in words {
            let m = self.motif(w).ok_or_else(|| Error::invalid(format!("word `{w}` is not in the vocabulary")))?;
            data.extend_from_slice(m.data());
        }
        let frames = data.len() / self.dims.frame_len().max(1);
        if words.is_empty() || frames > self.dims.max_len {
            return Err(Error::SentenceTooLong { sentence: words.join(" "), frames, limit: self.dims.max_len });
        }
        PoseSequence::new(self.dims, data)
    }
}

fn motif_distance(a: &PoseSequence, b: &PoseSequence) -> f64 {
    let n = a.len().max(b.len());
    let d = a.dims().dim;
    (0..n)
        .map(|f| mean_keypoint_distance(a.frame(f * a.len() / n), b.frame(f * b.len() / n), d))
        .sum::<f64>()
        / n as f64
}

fn polar(r: f64, angle: f64) -> [f64; 2] {
    [r * angle.cos(), r * angle.sin()]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

/// Per-word hand pose parameters, spread so that different words differ in
/// hand position, motion and shape.
struct HandStyle {
    center: [f64; 2],
    freq: f64,
    phase: f64,
    orientation: f64,
    spread: f64,
    curl: f64,
}

impl HandStyle {
    fn wrist(&self, s: f64) -> [f64; 2] {
        add(self.center, polar(0.07, TAU * self.freq * s + self.phase))
    }

    fn points(&self, s: f64) -> Vec<[f64; 2]> {
        let wrist = self.wrist(s);
        let theta = self.orientation + 0.4 * (PI * s).sin();
        let mut pts = vec![wrist];
        for finger in 0..5 {
            let dir = theta + (finger as f64 - 2.0) * self.spread;
            for joint in 0..4 {
                let reach = 0.025 * (joint + 1) as f64 * (1.0 - self.curl * joint as f64 / 4.0);
                pts.push(add(wrist, polar(reach, dir)));
            }
        }
        pts
    }
}

fn hand_style(side: f64, slot: f64, i: usize) -> HandStyle {
    HandStyle {
        center: add([side * 0.15, -0.05], polar(0.15, TAU * slot)),
        freq: 1.0 + (i % 2) as f64,
        phase: 0.7 * i as f64,
        orientation: FRAC_PI_2 + side * 0.3 * ((i % 4) as f64 - 1.5),
        spread: 0.25 + 0.05 * (i % 3) as f64,
        curl: 0.5 * (i % 2) as f64,
    }
}

fn motif_frames(dims: PoseDims, i: usize, n: usize, frames: usize) -> Vec<f64> {
    let left = hand_style(-1.0, i as f64 / n as f64, i);
    let right = hand_style(1.0, (3 * i) as f64 / n as f64 + 0.5, i + 1);
    let mouth_open = 0.02 * (i % 3) as f64;
    let mut out = Vec::with_capacity(frames * dims.frame_len());
    for f in 0..frames {
        let s = f as f64 / (frames - 1) as f64;
        let mut kp = vec![[0.0; 2]; DEFAULT_KEYPOINTS];
        let lh = left.points(s);
        let rh = right.points(s);
        kp[LEFT_HAND].copy_from_slice(&lh);
        kp[RIGHT_HAND].copy_from_slice(&rh);
        debug_assert_eq!(lh.len(), HAND_POINTS);

        let b = |j: usize| BODY.start + j;
        let l_sh = [-0.2, -0.02];
        let r_sh = [0.2, -0.02];
        kp[b(body::NECK)] = [0.0, 0.0];
        kp[b(body::L_SHOULDER)] = l_sh;
        kp[b(body::R_SHOULDER)] = r_sh;
        kp[b(body::L_ELBOW)] = [(l_sh[0] + lh[0][0]) / 2.0, (l_sh[1] + lh[0][1]) / 2.0 - 0.05];
        kp[b(body::R_ELBOW)] = [(r_sh[0] + rh[0][0]) / 2.0, (r_sh[1] + rh[0][1]) / 2.0 - 0.05];
        kp[b(body::L_WRIST)] = lh[0];
        kp[b(body::R_WRIST)] = rh[0];
        kp[b(body::CHEST)] = [0.0, -0.2];
        kp[b(body::MID_HIP)] = [0.0, -0.5];
        kp[b(body::L_HIP)] = [-0.1, -0.45];
        kp[b(body::R_HIP)] = [0.1, -0.45];

        let fc = |j: usize| FACE.start + j;
        for j in 0..face::OUTLINE {
            let p = add([0.0, 0.33], polar(0.17, FRAC_PI_2 + TAU * j as f64 / face::OUTLINE as f64));
            kp[fc(j)] = p;
        }
        kp[fc(0)] = [0.0, 0.5];
        kp[fc(face::L_EYE)] = [-0.06, 0.37];
        kp[fc(face::R_EYE)] = [0.06, 0.37];
        kp[fc(face::NOSE)] = [0.0, 0.32];
        kp[fc(face::MOUTH_LEFT)] = [-0.05, 0.26];
        kp[fc(face::MOUTH_RIGHT)] = [0.05, 0.26];
        kp[fc(face::MOUTH_CENTER)] = [0.0, 0.26 - mouth_open * (PI * s).sin()];

        for p in kp {
            out.extend_from_slice(&p);
            out.extend(std::iter::repeat_n(0.0, dims.dim - 2));
        }
    }
    out
}

/// Draws `n` sentences and their jittered poses. Deterministic in
/// `(grammar, n, seed)`.
pub fn generate_synthetic(grammar: &SyntheticGrammar, n: usize, seed: u64) -> Result<Vec<SignTextPair>> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, grammar.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let (lo, hi) = grammar.sentence_len;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(lo..=hi);
        let mut picks = index::sample(&mut rng, grammar.vocabulary.len(), len).into_vec();
        picks.sort_unstable();
        let words: Vec<String> = picks.iter().map(|&w| grammar.vocabulary[w].clone()).collect();
        let clean = grammar.render(&words)?;
        let data = if grammar.noise_std > 0.0 {
            clean.data().iter().map(|c| c + noise.sample(&mut rng)).collect()
        } else {
            clean.data().to_vec()
        };
        let pose = PoseSequence::new(grammar.dims, data)?;
        out.push(SignTextPair::new(format!("syn{seed}-{i:05}"), words, pose, None)?);
    }
    Ok(out)
}
