use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use t2sd_core::pose::skeleton::edges;
use t2sd_core::pose::{pad_to_length, truncate_at_eos, Dataset, PoseSequence};
use t2sd_core::{Error, Result};

const SIZE: f64 = 400.0;
const MARGIN: f64 = 20.0;

/// Writes `<out_dir>/<id>/frame_NNNN.svg` for every `frame_step`-th frame of
/// each sequence after End-of-Sign truncation. Returns the file count.
pub fn render_dataset(data: &Dataset, frame_step: usize, threshold: f64, out_dir: &Path) -> Result<usize> {
    if frame_step == 0 {
        return Err(Error::Invalid("frame step must be positive".into()));
    }
    let dims = data.header.dims();
    let mut written = 0;
    for pair in &data.pairs {
        let seq = truncate_at_eos(&pad_to_length(&pair.pose, dims.max_len)?, threshold)?.sequence;
        let dir = out_dir.join(sanitize(&pair.id));
        fs::create_dir_all(&dir)?;
        let bounds = Bounds::of(&seq);
        for f in (0..seq.len()).step_by(frame_step) {
            fs::write(dir.join(format!("frame_{f:04}.svg")), frame_svg(&seq, f, &bounds))?;
            written += 1;
        }
    }
    Ok(written)
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

struct Bounds {
    min: [f64; 2],
    scale: f64,
}

impl Bounds {
    fn of(seq: &PoseSequence) -> Self {
        let d = seq.dims().dim;
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in seq.data().chunks(d) {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
        Bounds { min, scale: (SIZE - 2.0 * MARGIN) / extent }
    }

    /// Image coordinates with y pointing down.
    fn map(&self, p: &[f64]) -> (f64, f64) {
        (MARGIN + (p[0] - self.min[0]) * self.scale, SIZE - MARGIN - (p[1] - self.min[1]) * self.scale)
    }
}

fn frame_svg(seq: &PoseSequence, f: usize, b: &Bounds) -> String {
    let k = seq.dims().keypoints;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if k == t2sd_core::pose::DEFAULT_KEYPOINTS {
        for (i, j) in edges() {
            let (x1, y1) = b.map(seq.keypoint(f, i));
            let (x2, y2) = b.map(seq.keypoint(f, j));
            let _ = writeln!(s, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="black" stroke-width="1.5"/>"#);
        }
    }
    for i in 0..k {
        let (x, y) = b.map(seq.keypoint(f, i));
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="crimson"/>"#);
    }
    s.push_str("</svg>\n");
    s
}
