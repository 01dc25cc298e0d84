//! Co-registration of bands and captures: keypoints, descriptor matching,
//! RANSAC affine estimation, bilinear warping and alignment scoring.

mod affine;
mod keypoints;
mod matching;
mod ransac;
mod score;
mod warp;

use thiserror::Error;

pub use affine::AffineTransform;
pub use keypoints::{detect_keypoints, DetectorConfig, Keypoint, DESCRIPTOR_LEN};
pub use matching::{match_descriptors, MatchPair};
pub use ransac::{estimate_affine_points, estimate_affine_ransac, RansacConfig, RansacResult};
pub use score::{registration_score, RegistrationScore, MIN_OVERLAP, MI_BINS};
pub use warp::warp_band;

use crate::raster::{Band, RasterError};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("image is {width}x{height}, keypoint detection needs at least 32x32")]
    ImageTooSmall { width: usize, height: usize },
    #[error("need at least 3 matches, got {0}")]
    TooFewMatches(usize),
    #[error("best model has {best} inliers, {required} required")]
    NoConsensus { best: usize, required: usize },
    #[error("every sampled correspondence triple was degenerate")]
    DegenerateSample,
    #[error("transform is not invertible")]
    SingularTransform,
    #[error("only {0} jointly valid pixels, need at least 100")]
    InsufficientOverlap(usize),
    #[error("registration rejected: NCC {ncc:.3} below {threshold}")]
    RegistrationRejected { ncc: f64, threshold: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("transform file: {0}")]
    Parse(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub detector: DetectorConfig,
    pub ratio: f64,
    pub ransac: RansacConfig,
    /// Minimum NCC between the reference and the aligned band.
    pub min_ncc: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            detector: DetectorConfig::default(),
            ratio: 0.75,
            ransac: RansacConfig::default(),
            min_ncc: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    /// Maps `moving` pixel coordinates into the reference frame.
    pub transform: AffineTransform,
    pub aligned: Band,
    pub inliers: usize,
    /// Score of the aligned band, negated first when `contrast_inverted`.
    pub score: RegistrationScore,
    /// The match came from the negated moving band (e.g. red against NIR
    /// over vegetation, where bright and dark swap).
    pub contrast_inverted: bool,
}

fn attempt(
    reference: &Band,
    kr: &[Keypoint],
    moving: &Band,
    inverted: bool,
    config: &RegistrationConfig,
) -> Result<Alignment, RegistrationError> {
    let probe = if inverted { moving.map_valid(|v| -v) } else { moving.clone() };
    let km = detect_keypoints(&probe, &config.detector)?;
    let matches = match_descriptors(&km, kr, config.ratio);
    let fit = estimate_affine_ransac(&matches, &km, kr, &config.ransac)?;
    let aligned = warp_band(moving, &fit.transform, reference.width(), reference.height())?;
    let score = if inverted {
        registration_score(reference, &aligned.map_valid(|v| -v))?
    } else {
        registration_score(reference, &aligned)?
    };
    if score.ncc < config.min_ncc {
        return Err(RegistrationError::RegistrationRejected { ncc: score.ncc, threshold: config.min_ncc });
    }
    Ok(Alignment { transform: fit.transform, aligned, inliers: fit.inlier_count, score, contrast_inverted: inverted })
}

/// Aligns `moving` onto `reference`: detect, match, estimate, warp, then
/// validate the result by NCC. When the direct attempt fails, the moving
/// band is retried with its contrast inverted.
pub fn register_band(
    reference: &Band,
    moving: &Band,
    config: &RegistrationConfig,
) -> Result<Alignment, RegistrationError> {
    let kr = detect_keypoints(reference, &config.detector)?;
    match attempt(reference, &kr, moving, false, config) {
        Ok(a) => Ok(a),
        Err(
            first @ (RegistrationError::TooFewMatches(_)
            | RegistrationError::NoConsensus { .. }
            | RegistrationError::DegenerateSample
            | RegistrationError::RegistrationRejected { .. }),
        ) => attempt(reference, &kr, moving, true, config).map_err(|_| first),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::gaussian_blur;
    use crate::raster::BandKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture with enough structure for keypoints.
    pub(crate) fn texture(size: usize, seed: u64) -> Band {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f32> = (0..size * size).map(|_| rng.random::<f32>()).collect();
        let blurred = gaussian_blur(&noise, size, size, 2.5);
        Band::new(BandKind::Nir, size, size, blurred).unwrap()
    }

    fn crop(b: &Band, x0: usize, y0: usize, w: usize, h: usize) -> Band {
        Band::from_fn(b.kind(), w, h, |x, y| b.get(x + x0, y + y0)).unwrap()
    }

    #[test]
    fn registers_a_shifted_rotated_copy() {
        let base = texture(200, 4);
        let t = AffineTransform::rotation_about(0.05, 100.0, 100.0).then(&AffineTransform::translation(4.0, -3.0));
        let moved = warp_band(&base, &t, 200, 200).unwrap();
        let moved = crop(&moved.map_valid(|v| v), 20, 20, 160, 160);
        let reference = crop(&base, 20, 20, 160, 160);
        let result = register_band(&reference, &moved, &RegistrationConfig::default()).unwrap();
        // moving -> reference is the inverse of t, conjugated by the shared crop
        let expect = t.inverse().unwrap();
        for (x, y) in [(10.0, 10.0), (150.0, 10.0), (10.0, 150.0), (150.0, 150.0)] {
            let (ex, ey) = expect.apply(x + 20.0, y + 20.0);
            let (gx, gy) = result.transform.apply(x, y);
            assert!((ex - 20.0 - gx).abs() < 0.5 && (ey - 20.0 - gy).abs() < 0.5);
        }
        assert!(result.score.ncc > 0.95);
    }

    #[test]
    fn misalignment_scores_lower() {
        let base = texture(160, 5);
        let shifted = warp_band(&base, &AffineTransform::translation(6.0, 4.0), 160, 160).unwrap();
        let aligned = warp_band(&shifted, &AffineTransform::translation(-6.0, -4.0), 160, 160).unwrap();
        let good = registration_score(&base, &aligned).unwrap();
        let bad = registration_score(&base, &shifted).unwrap();
        assert!(good.ncc > bad.ncc);
        assert!(good.mutual_information > bad.mutual_information);
    }

    #[test]
    fn unrelated_bands_are_rejected() {
        let a = texture(128, 1);
        let b = texture(128, 2);
        let err = register_band(&a, &b, &RegistrationConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            RegistrationError::NoConsensus { .. }
                | RegistrationError::RegistrationRejected { .. }
                | RegistrationError::TooFewMatches(_)
        ));
    }

    #[test]
    fn inverted_contrast_is_recovered() {
        let base = texture(200, 6);
        let t = AffineTransform::translation(3.0, -2.0);
        let moved = warp_band(&base, &t, 200, 200).unwrap();
        let reference = crop(&base, 20, 20, 160, 160);
        let moving = crop(&moved, 20, 20, 160, 160).map_valid(|v| 1.0 - v);
        let result = register_band(&reference, &moving, &RegistrationConfig::default()).unwrap();
        assert!(result.contrast_inverted);
        let (gx, gy) = result.transform.apply(50.0, 60.0);
        assert!((gx - 47.0).abs() < 0.5 && (gy - 62.0).abs() < 0.5, "{gx} {gy}");
        assert!(result.score.ncc > 0.9);
    }
}
