//! The 79-keypoint layout: left hand, right hand, body, face.

use std::ops::Range;

pub const HAND_POINTS: usize = 21;
pub const LEFT_HAND: Range<usize> = 0..21;
pub const RIGHT_HAND: Range<usize> = 21..42;
pub const BODY: Range<usize> = 42..53;
pub const FACE: Range<usize> = 53..79;

/// Body keypoints, offsets within [`BODY`].
pub mod body {
    pub const NECK: usize = 0;
    pub const L_SHOULDER: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const L_ELBOW: usize = 3;
    pub const R_ELBOW: usize = 4;
    pub const L_WRIST: usize = 5;
    pub const R_WRIST: usize = 6;
    pub const CHEST: usize = 7;
    pub const MID_HIP: usize = 8;
    pub const L_HIP: usize = 9;
    pub const R_HIP: usize = 10;
}

/// Face keypoints, offsets within [`FACE`]: a 20-point outline, two eyes,
/// the nose and three mouth points.
pub mod face {
    pub const OUTLINE: usize = 20;
    pub const L_EYE: usize = 20;
    pub const R_EYE: usize = 21;
    pub const NOSE: usize = 22;
    pub const MOUTH_LEFT: usize = 23;
    pub const MOUTH_RIGHT: usize = 24;
    pub const MOUTH_CENTER: usize = 25;
}

/// Hand bones for the usual 21-point hand model (wrist, then four joints per
/// finger from thumb to little finger).
fn hand_edges(base: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(20);
    for finger in 0..5 {
        let first = base + 1 + finger * 4;
        edges.push((base, first));
        for j in 0..3 {
            edges.push((first + j, first + j + 1));
        }
    }
    edges
}

/// Bones drawn when rendering a 79-point frame.
pub fn edges() -> Vec<(usize, usize)> {
    use body::*;
    let b = |i: usize| BODY.start + i;
    let mut e = hand_edges(LEFT_HAND.start);
    e.extend(hand_edges(RIGHT_HAND.start));
    e.extend([
        (b(NECK), b(L_SHOULDER)),
        (b(NECK), b(R_SHOULDER)),
        (b(L_SHOULDER), b(L_ELBOW)),
        (b(R_SHOULDER), b(R_ELBOW)),
        (b(L_ELBOW), b(L_WRIST)),
        (b(R_ELBOW), b(R_WRIST)),
        (b(NECK), b(CHEST)),
        (b(CHEST), b(MID_HIP)),
        (b(MID_HIP), b(L_HIP)),
        (b(MID_HIP), b(R_HIP)),
        (b(L_WRIST), LEFT_HAND.start),
        (b(R_WRIST), RIGHT_HAND.start),
    ]);
    for i in 0..face::OUTLINE {
        e.push((FACE.start + i, FACE.start + (i + 1) % face::OUTLINE));
    }
    e.push((FACE.start + face::MOUTH_LEFT, FACE.start + face::MOUTH_CENTER));
    e.push((FACE.start + face::MOUTH_CENTER, FACE.start + face::MOUTH_RIGHT));
    e
}
