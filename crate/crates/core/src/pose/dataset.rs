use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PoseDims, PoseSequence};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "t2sd-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const EMBEDDING_DIM: usize = 512;

/// First line of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetHeader {
    pub format: &'static str,
    pub version: u32,
    #[serde(rename = "K")]
    pub keypoints: usize,
    pub d: usize,
    #[serde(rename = "U")]
    pub max_len: usize,
    pub embedding_dim: usize,
}

#[derive(Deserialize)]
struct RawHeader {
    format: String,
    version: u32,
    #[serde(rename = "K")]
    keypoints: usize,
    d: usize,
    #[serde(rename = "U")]
    max_len: usize,
    embedding_dim: usize,
}

impl DatasetHeader {
    pub fn new(dims: PoseDims) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT,
            version: DATASET_VERSION,
            keypoints: dims.keypoints,
            d: dims.dim,
            max_len: dims.max_len,
            embedding_dim: EMBEDDING_DIM,
        }
    }

    pub fn dims(&self) -> PoseDims {
        PoseDims { keypoints: self.keypoints, dim: self.d, max_len: self.max_len }
    }
}

/// A sentence and the signing clip that expresses it.
#[derive(Debug, Clone, PartialEq)]
pub struct SignTextPair {
    pub id: String,
    pub text: Vec<String>,
    pub pose: PoseSequence,
    /// Precomputed sentence embedding, when the dataset ships one.
    pub embedding: Option<Vec<f64>>,
}

impl SignTextPair {
    pub fn new(id: impl Into<String>, text: Vec<String>, pose: PoseSequence, embedding: Option<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        if text.is_empty() {
            return Err(Error::Sample { id, msg: "empty text".into() });
        }
        if let Some(e) = &embedding {
            if e.len() != EMBEDDING_DIM || e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Sample {
                    id,
                    msg: format!("embedding must hold {EMBEDDING_DIM} finite values"),
                });
            }
        }
        Ok(SignTextPair { id, text, pose, embedding })
    }

    pub fn sentence(&self) -> String {
        self.text.join(" ")
    }
}

/// Header plus samples; an empty file yields the default header and no pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub pairs: Vec<SignTextPair>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    text: String,
    frames: Vec<Vec<Vec<f64>>>,
    embedding: Option<Vec<f64>>,
}

fn parse_pair(line: Line, dims: PoseDims) -> Result<SignTextPair> {
    let Line { id, text, frames, embedding } = line;
    let mut data = Vec::with_capacity(frames.len() * dims.frame_len());
    for frame in &frames {
        if frame.len() != dims.keypoints {
            return Err(Error::KeypointCount { id, expected: dims.keypoints, found: frame.len() });
        }
        for kp in frame {
            if kp.len() != dims.dim {
                return Err(Error::Sample {
                    id,
                    msg: format!("keypoint has {} coordinates, expected {}", kp.len(), dims.dim),
                });
            }
            if kp.iter().any(|c| !c.is_finite()) {
                return Err(Error::Sample { id, msg: "non-finite coordinate".into() });
            }
            data.extend_from_slice(kp);
        }
    }
    let pose = PoseSequence::new(dims, data).map_err(|e| Error::Sample { id: id.clone(), msg: e.to_string() })?;
    let tokens = text.split_whitespace().map(str::to_owned).collect();
    SignTextPair::new(id, tokens, pose, embedding)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_owned(), line, msg };
    let mut header: Option<DatasetHeader> = None;
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match header {
            None => {
                let raw: RawHeader = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
                if raw.format != DATASET_FORMAT || raw.version != DATASET_VERSION {
                    return Err(parse_err(lineno, format!("unsupported format {} v{}", raw.format, raw.version)));
                }
                if raw.embedding_dim != EMBEDDING_DIM {
                    return Err(parse_err(lineno, format!("embedding_dim must be {EMBEDDING_DIM}")));
                }
                let dims = PoseDims::new(raw.keypoints, raw.d, raw.max_len).map_err(|e| parse_err(lineno, e.to_string()))?;
                header = Some(DatasetHeader::new(dims));
            }
            Some(h) => {
                let raw: Line = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
                pairs.push(parse_pair(raw, h.dims())?);
            }
        }
    }
    Ok(Dataset { header: header.unwrap_or_else(|| DatasetHeader::new(PoseDims::default())), pairs })
}

pub fn write_dataset(path: impl AsRef<Path>, header: &DatasetHeader, pairs: &[SignTextPair]) -> Result<()> {
    let dims = header.dims();
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    writeln!(w)?;
    for p in pairs {
        if p.pose.dims().keypoints != dims.keypoints || p.pose.dims().dim != dims.dim {
            return Err(Error::KeypointCount { id: p.id.clone(), expected: dims.keypoints, found: p.pose.dims().keypoints });
        }
        if p.pose.len() > dims.max_len {
            return Err(Error::Sample { id: p.id.clone(), msg: format!("{} frames exceed U = {}", p.pose.len(), dims.max_len) });
        }
        let frames = p
            .pose
            .frames()
            .map(|f| f.chunks(dims.dim).map(<[f64]>::to_vec).collect())
            .collect();
        let line = Line { id: p.id.clone(), text: p.sentence(), frames, embedding: p.embedding.clone() };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> PoseDims {
        PoseDims::new(3, 2, 8).unwrap()
    }

    fn pair(id: &str, len: usize, emb: bool) -> SignTextPair {
        let data = (0..len * 6).map(|i| i as f64 * 0.1 - 0.37).collect();
        let pose = PoseSequence::new(dims(), data).unwrap();
        let embedding = emb.then(|| (0..512).map(|i| (i as f64).sin() / 3.0).collect());
        SignTextPair::new(id, vec!["hello".into(), "rain".into()], pose, embedding).unwrap()
    }

    #[test]
    fn empty_file_gives_no_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        File::create(&path).unwrap();
        assert!(load_dataset(&path).unwrap().pairs.is_empty());
    }

    #[test]
    fn three_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let pairs = vec![pair("a", 1, false), pair("b", 5, true), pair("c", 8, false)];
        let header = DatasetHeader::new(dims());
        write_dataset(&path, &header, &pairs).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.header, header);
        assert_eq!(back.pairs, pairs);
        assert_eq!(back.pairs.iter().map(|p| p.pose.len()).collect::<Vec<_>>(), [1, 5, 8]);
    }

    #[test]
    fn extra_keypoint_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let frame: Vec<Vec<f64>> = vec![vec![0.0, 0.0]; 80];
        let line = serde_json::json!({"id": "s42", "text": "a", "frames": [frame], "embedding": null});
        std::fs::write(&path, format!("{}\n{}\n", serde_json::to_string(&DatasetHeader::new(PoseDims::default())).unwrap(), line)).unwrap();
        match load_dataset(&path) {
            Err(Error::KeypointCount { id, expected: 79, found: 80 }) => assert_eq!(id, "s42"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let header = serde_json::to_string(&DatasetHeader::new(dims())).unwrap();
        std::fs::write(&path, format!("{header}\n{{not json\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 2, .. })));
    }
}
