//! Separable Gaussian smoothing on raw planes.

/// 1-D Gaussian taps covering ±⌈3σ⌉, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Gaussian blur of a `width × height` plane with edge replication.
pub fn gaussian_blur(plane: &[f32], width: usize, height: usize, sigma: f64) -> Vec<f32> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0f64;
            for (k, &w) in kernel.iter().enumerate() {
                let sx = (x as isize + k as isize - r).clamp(0, width as isize - 1) as usize;
                acc += w * row[sx] as f64;
            }
            tmp[y * width + x] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0f64;
            for (k, &w) in kernel.iter().enumerate() {
                let sy = (y as isize + k as isize - r).clamp(0, height as isize - 1) as usize;
                acc += w * tmp[sy * width + x] as f64;
            }
            out[y * width + x] = acc as f32;
        }
    }
    out
}

/// Gaussian blur restricted to valid pixels (normalized convolution).
/// Invalid pixels contribute nothing and stay invalid in the caller's mask.
pub fn masked_gaussian_blur(plane: &[f32], valid: &[bool], width: usize, height: usize, sigma: f64) -> Vec<f32> {
    let weights: Vec<f32> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let weighted: Vec<f32> = plane.iter().zip(&weights).map(|(v, w)| v * w).collect();
    let num = gaussian_blur(&weighted, width, height, sigma);
    let den = gaussian_blur(&weights, width, height, sigma);
    num.iter().zip(&den).zip(valid).map(|((n, d), &ok)| if ok && *d > 0.0 { n / d } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.6);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let p = vec![0.7f32; 40];
        assert!(gaussian_blur(&p, 8, 5, 2.0).iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn masked_blur_ignores_invalid_payload() {
        let p = vec![0.5, 100.0, 0.5, 0.5];
        let valid = vec![true, false, true, true];
        let out = masked_gaussian_blur(&p, &valid, 2, 2, 1.0);
        assert!((out[0] - 0.5).abs() < 1e-6);
        assert_eq!(out[1], 0.0);
    }
}
