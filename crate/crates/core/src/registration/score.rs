use super::RegistrationError;
use crate::raster::Band;

pub const MI_BINS: usize = 32;
pub const MIN_OVERLAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationScore {
    /// Normalized cross-correlation over jointly valid pixels.
    pub ncc: f64,
    /// Mutual information in bits.
    pub mutual_information: f64,
}

/// Scores how well two same-sized bands line up.
pub fn registration_score(a: &Band, b: &Band) -> Result<RegistrationScore, RegistrationError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(RegistrationError::InsufficientOverlap(0));
    }
    let pairs: Vec<(f64, f64)> = a
        .values()
        .iter()
        .zip(a.valid())
        .zip(b.values().iter().zip(b.valid()))
        .filter(|((_, &va), (_, &vb))| va && vb)
        .map(|((&x, _), (&y, _))| (x as f64, y as f64))
        .collect();
    if pairs.len() < MIN_OVERLAP {
        return Err(RegistrationError::InsufficientOverlap(pairs.len()));
    }
    Ok(RegistrationScore { ncc: ncc(&pairs), mutual_information: mutual_information(&pairs) })
}

fn ncc(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |s, p| (s.0 + p.0, s.1 + p.1));
    let (ma, mb) = (ma / n, mb / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn bin_of(v: f64, lo: f64, hi: f64) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * MI_BINS as f64) as usize).min(MI_BINS - 1)
}

fn mutual_information(pairs: &[(f64, f64)]) -> f64 {
    let (mut alo, mut ahi, mut blo, mut bhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pairs {
        alo = alo.min(x);
        ahi = ahi.max(x);
        blo = blo.min(y);
        bhi = bhi.max(y);
    }
    let mut joint = [[0usize; MI_BINS]; MI_BINS];
    for &(x, y) in pairs {
        joint[bin_of(x, alo, ahi)][bin_of(y, blo, bhi)] += 1;
    }
    let n = pairs.len() as f64;
    let pa: Vec<f64> = joint.iter().map(|row| row.iter().sum::<usize>() as f64 / n).collect();
    let pb: Vec<f64> = (0..MI_BINS).map(|j| joint.iter().map(|row| row[j]).sum::<usize>() as f64 / n).collect();
    let mut mi = 0.0;
    for i in 0..MI_BINS {
        for j in 0..MI_BINS {
            if joint[i][j] > 0 {
                let p = joint[i][j] as f64 / n;
                mi += p * (p / (pa[i] * pb[j])).log2();
            }
        }
    }
    mi.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BandKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, size: usize) -> Band {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Band::new(BandKind::Red, size, size, (0..size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn self_correlation_is_one() {
        let a = noise(1, 32);
        let s = registration_score(&a, &a).unwrap();
        assert!((s.ncc - 1.0).abs() < 1e-9);
        assert!(s.mutual_information > 3.0);
    }

    #[test]
    fn negation_anticorrelates() {
        let a = Band::from_fn(BandKind::Red, 20, 20, |x, y| x as f32 - 9.5 + 0.3 * (y as f32 - 9.5)).unwrap();
        let neg = a.map_valid(|v| -v);
        assert!((registration_score(&a, &neg).unwrap().ncc + 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_noise_has_low_information() {
        let s = registration_score(&noise(7, 256), &noise(8, 256)).unwrap();
        assert!(s.mutual_information < 0.15, "MI {}", s.mutual_information);
        assert!(s.ncc.abs() < 0.05);
    }

    #[test]
    fn small_overlap_rejected() {
        let a = noise(1, 9);
        assert!(matches!(registration_score(&a, &a), Err(RegistrationError::InsufficientOverlap(81))));
    }
}
