use rayon::prelude::*;

use super::keypoints::Keypoint;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub index_a: usize,
    pub index_b: usize,
    /// L2 distance between the two descriptors.
    pub distance: f64,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

/// Nearest-neighbour matching with the ratio test: a keypoint of `a` is
/// matched to its nearest neighbour in `b` only when that neighbour is
/// closer than `ratio` times the second nearest.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<MatchPair> {
    assert!(ratio > 0.0 && ratio < 1.0, "ratio must lie in (0, 1)");
    if b.is_empty() {
        return Vec::new();
    }
    let ratio2 = ratio * ratio;
    a.par_iter()
        .enumerate()
        .filter_map(|(i, ka)| {
            let (mut best, mut second, mut best_j) = (f64::INFINITY, f64::INFINITY, 0);
            for (j, kb) in b.iter().enumerate() {
                let d = squared_distance(&ka.descriptor, &kb.descriptor);
                if d < best {
                    second = best;
                    best = d;
                    best_j = j;
                } else if d < second {
                    second = d;
                }
            }
            (best < ratio2 * second).then(|| MatchPair { index_a: i, index_b: best_j, distance: best.sqrt() })
        })
        .collect()
}
