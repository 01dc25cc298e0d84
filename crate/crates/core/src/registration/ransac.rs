use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::affine::AffineTransform;
use super::keypoints::Keypoint;
use super::matching::MatchPair;
use super::RegistrationError;

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { iterations: 2000, inlier_threshold_px: 2.0, min_inliers: 12, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: AffineTransform,
    /// One flag per input match.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    count: usize,
    error: f64,
    iteration: usize,
}

impl Candidate {
    /// More inliers wins, then lower total error, then earlier iteration.
    fn better_than(&self, other: &Candidate) -> bool {
        (self.count, other.error, other.iteration) > (other.count, self.error, self.iteration)
    }
}

fn score(t: &AffineTransform, src: &[(f64, f64)], dst: &[(f64, f64)], thr2: f64) -> (usize, f64) {
    let (mut count, mut error) = (0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (x, y) = t.apply(p.0, p.1);
        let e2 = (x - q.0).powi(2) + (y - q.1).powi(2);
        if e2 < thr2 {
            count += 1;
            error += e2.sqrt();
        }
    }
    (count, error)
}

/// Random stream for one iteration; depends only on `(seed, iteration)` so
/// results do not depend on thread scheduling.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Estimates the affine map taking keypoints of `a` onto keypoints of `b`.
pub fn estimate_affine_ransac(
    matches: &[MatchPair],
    a: &[Keypoint],
    b: &[Keypoint],
    config: &RansacConfig,
) -> Result<RansacResult, RegistrationError> {
    let src: Vec<(f64, f64)> = matches.iter().map(|m| (a[m.index_a].x, a[m.index_a].y)).collect();
    let dst: Vec<(f64, f64)> = matches.iter().map(|m| (b[m.index_b].x, b[m.index_b].y)).collect();
    estimate_affine_points(&src, &dst, config)
}

/// RANSAC over raw point correspondences `src[i] -> dst[i]`.
pub fn estimate_affine_points(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    config: &RansacConfig,
) -> Result<RansacResult, RegistrationError> {
    assert_eq!(src.len(), dst.len());
    let n = src.len();
    if n < 3 {
        return Err(RegistrationError::TooFewMatches(n));
    }
    if config.iterations == 0 {
        return Err(RegistrationError::InvalidConfig("iterations must be at least 1".into()));
    }
    let thr2 = config.inlier_threshold_px.powi(2);

    let best = (0..config.iterations)
        .into_par_iter()
        .filter_map(|iteration| {
            let mut rng = iteration_rng(config.seed, iteration);
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let mut k = rng.random_range(0..n - 2);
            for taken in [i.min(j), i.max(j)] {
                if k >= taken {
                    k += 1;
                }
            }
            let s = [src[i], src[j], src[k]];
            let d = [dst[i], dst[j], dst[k]];
            let t = AffineTransform::fit(&s, &d).ok().filter(|t| t.is_invertible())?;
            let (count, error) = score(&t, src, dst, thr2);
            Some((Candidate { count, error, iteration }, t))
        })
        .reduce_with(|x, y| if y.0.better_than(&x.0) { y } else { x });

    let Some((candidate, mut transform)) = best else {
        return Err(RegistrationError::DegenerateSample);
    };
    if candidate.count < config.min_inliers {
        return Err(RegistrationError::NoConsensus { best: candidate.count, required: config.min_inliers });
    }

    let mask_for = |t: &AffineTransform| -> Vec<bool> {
        src.iter()
            .zip(dst)
            .map(|(p, q)| {
                let (x, y) = t.apply(p.0, p.1);
                (x - q.0).powi(2) + (y - q.1).powi(2) < thr2
            })
            .collect()
    };
    let mut inliers = mask_for(&transform);
    // least-squares refit over the consensus set, repeated until it settles
    for _ in 0..5 {
        let (s, d): (Vec<_>, Vec<_>) =
            src.iter().zip(dst).zip(&inliers).filter(|(_, &ok)| ok).map(|((p, q), _)| (*p, *q)).unzip();
        let refit = match AffineTransform::fit(&s, &d) {
            Ok(t) if t.is_invertible() => t,
            _ => break,
        };
        let next = mask_for(&refit);
        let next_count = next.iter().filter(|&&v| v).count();
        if next_count < config.min_inliers {
            break;
        }
        transform = refit;
        if next == inliers {
            break;
        }
        inliers = next;
    }
    let inlier_count = inliers.iter().filter(|&&v| v).count();
    Ok(RansacResult { transform, inliers, inlier_count })
}
