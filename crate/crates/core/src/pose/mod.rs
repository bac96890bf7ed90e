//! Pose-sequence data model: frames of `K` keypoints in `d` dimensions,
//! normalization, End-of-Sign padding and truncation, dataset I/O and the
//! synthetic motif grammar.

mod dataset;
pub mod skeleton;
mod synth;

pub use dataset::{
    load_dataset, write_dataset, Dataset, DatasetHeader, SignTextPair, DATASET_FORMAT, DATASET_VERSION, EMBEDDING_DIM,
};
pub use synth::{generate_synthetic, GrammarConfig, SyntheticGrammar, DEFAULT_VOCABULARY};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_KEYPOINTS: usize = 79;
pub const DEFAULT_MAX_LEN: usize = 256;
/// Coordinate of every keypoint in the End-of-Sign frame.
pub const SENTINEL_COORD: f64 = 2.0;
pub const DEFAULT_EOS_THRESHOLD: f64 = 0.5;

/// Frame geometry shared by every sequence in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseDims {
    /// Keypoints per frame (`K`).
    pub keypoints: usize,
    /// Coordinates per keypoint (`d`, 2 or 3).
    pub dim: usize,
    /// Maximum sequence length (`U`).
    pub max_len: usize,
}

impl Default for PoseDims {
    fn default() -> Self {
        PoseDims { keypoints: DEFAULT_KEYPOINTS, dim: 2, max_len: DEFAULT_MAX_LEN }
    }
}

impl PoseDims {
    pub fn new(keypoints: usize, dim: usize, max_len: usize) -> Result<Self> {
        if keypoints == 0 || max_len == 0 || !(2..=3).contains(&dim) {
            return Err(Error::invalid(format!("invalid pose dims K={keypoints} d={dim} U={max_len}")));
        }
        Ok(PoseDims { keypoints, dim, max_len })
    }

    /// Values per frame, `K·d`.
    pub fn frame_len(&self) -> usize {
        self.keypoints * self.dim
    }

    /// Normalization reference joint: the first body keypoint of the
    /// 79-point layout, keypoint 0 for any other layout.
    pub fn root(&self) -> usize {
        if self.keypoints == DEFAULT_KEYPOINTS {
            skeleton::BODY.start
        } else {
            0
        }
    }

    pub fn sentinel_frame(&self) -> Vec<f64> {
        vec![SENTINEL_COORD; self.frame_len()]
    }
}

/// One frame: `K` keypoints of `d` finite coordinates, keypoint-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    coords: Vec<f64>,
}

impl PoseFrame {
    pub fn new(dims: PoseDims, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != dims.frame_len() {
            return Err(Error::invalid(format!(
                "frame has {} values, expected {}",
                coords.len(),
                dims.frame_len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        Ok(PoseFrame { coords })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Content frames of one signing clip, `1 ≤ len ≤ U`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    dims: PoseDims,
    data: Vec<f64>,
}

impl PoseSequence {
    /// Builds a sequence from flat keypoint-major frame data.
    pub fn new(dims: PoseDims, data: Vec<f64>) -> Result<Self> {
        let fl = dims.frame_len();
        if data.is_empty() || !data.len().is_multiple_of(fl) {
            return Err(Error::invalid(format!(
                "sequence data of {} values is not a positive multiple of the frame size {fl}",
                data.len()
            )));
        }
        let len = data.len() / fl;
        if len > dims.max_len {
            return Err(Error::invalid(format!("sequence of {len} frames exceeds the limit {}", dims.max_len)));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        Ok(PoseSequence { dims, data })
    }

    pub fn from_frames(dims: PoseDims, frames: &[PoseFrame]) -> Result<Self> {
        let data = frames.iter().flat_map(|f| f.coords.iter().copied()).collect();
        Self::new(dims, data)
    }

    pub fn dims(&self) -> PoseDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dims.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let fl = self.dims.frame_len();
        &self.data[i * fl..(i + 1) * fl]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dims.frame_len())
    }

    pub fn keypoint(&self, frame: usize, k: usize) -> &[f64] {
        let d = self.dims.dim;
        &self.frame(frame)[k * d..(k + 1) * d]
    }

    /// Same frames, reinterpreted under a different length limit.
    pub fn with_max_len(&self, max_len: usize) -> Result<Self> {
        Self::new(PoseDims { max_len, ..self.dims }, self.data.clone())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over keypoints of the Euclidean distance between two frames.
pub fn mean_keypoint_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let k = a.len() / dim;
    a.chunks(dim).zip(b.chunks(dim)).map(|(p, q)| dist(p, q)).sum::<f64>() / k as f64
}

/// Largest pairwise keypoint distance within any frame of the sequence.
pub fn max_extent(seq: &PoseSequence) -> f64 {
    let d = seq.dims.dim;
    let mut best = 0.0f64;
    for frame in seq.frames() {
        let pts: Vec<&[f64]> = frame.chunks(d).collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                best = best.max(dist(pts[i], pts[j]));
            }
        }
    }
    best
}

/// Translates every frame so the root keypoint sits at the origin, then
/// scales the whole sequence so its maximum pairwise keypoint distance is 1.
pub fn normalize_pose(seq: &PoseSequence) -> Result<PoseSequence> {
    let dims = seq.dims;
    let (d, root) = (dims.dim, dims.root());
    let mut data = seq.data.clone();
    for frame in data.chunks_mut(dims.frame_len()) {
        let origin: Vec<f64> = frame[root * d..(root + 1) * d].to_vec();
        for kp in frame.chunks_mut(d) {
            for (c, o) in kp.iter_mut().zip(&origin) {
                *c -= o;
            }
        }
    }
    let centered = PoseSequence { dims, data };
    let extent = max_extent(&centered);
    if extent <= f64::EPSILON {
        return Err(Error::DegeneratePose);
    }
    // already unit extent: leave bits untouched so normalization is idempotent
    if (extent - 1.0).abs() <= 1e-12 {
        return Ok(centered);
    }
    let data = centered.data.iter().map(|c| c / extent).collect();
    Ok(PoseSequence { dims, data })
}

/// Pads with End-of-Sign frames to `max_len` frames; returns `[U, K, d]`.
pub fn pad_to_length(seq: &PoseSequence, max_len: usize) -> Result<Tensor<f64>> {
    let dims = seq.dims;
    if seq.len() > max_len {
        return Err(Error::invalid(format!("sequence of {} frames exceeds U = {max_len}", seq.len())));
    }
    let mut data = seq.data.clone();
    let sentinel = dims.sentinel_frame();
    for _ in seq.len()..max_len {
        data.extend_from_slice(&sentinel);
    }
    Tensor::from_vec(&[max_len, dims.keypoints, dims.dim], data)
}

/// Result of End-of-Sign detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Truncated {
    pub sequence: PoseSequence,
    /// False when no frame came within the threshold of the sentinel.
    pub eos_found: bool,
}

/// Cuts a padded `[U, K, d]` array at the first frame whose mean keypoint
/// distance to the sentinel is below `threshold`.
///
/// An End-of-Sign frame at index 0 leaves nothing to keep; the first frame
/// is kept then, so the result always has at least one frame.
pub fn truncate_at_eos(frames: &Tensor<f64>, threshold: f64) -> Result<Truncated> {
    let &[u, k, d] = frames.shape() else {
        return Err(Error::shape("truncate_at_eos", format!("expected [U, K, d], got {:?}", frames.shape())));
    };
    if threshold <= 0.0 {
        return Err(Error::invalid("EOS threshold must be positive"));
    }
    let dims = PoseDims::new(k, d, u)?;
    let sentinel = dims.sentinel_frame();
    let fl = dims.frame_len();
    let hit = frames
        .data()
        .chunks(fl)
        .position(|f| mean_keypoint_distance(f, &sentinel, d) < threshold);
    let (len, eos_found) = match hit {
        Some(0) => (1, true),
        Some(i) => (i, true),
        None => (u, false),
    };
    let sequence = PoseSequence::new(dims, frames.data()[..len * fl].to_vec())?;
    Ok(Truncated { sequence, eos_found })
}
