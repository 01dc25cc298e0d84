//! Seeded synthetic field: crop rows on soil with elliptical weed patches,
//! plus a reference panel, standing in for real captures at desk scale.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::PipelineError;
use crate::filters::gaussian_blur;
use crate::raster::{Band, BandKind, Class, LabelMask, MultispectralImage};

pub const MIN_FIELD_SIZE: usize = 512;
pub const NOISE_SIGMA: f64 = 0.02;
pub const IMPULSE_PROBABILITY: f64 = 0.001;
pub const PANEL_REFLECTANCE: f64 = 0.5;
pub const PANEL_SIZE: usize = 64;
/// Relative amplitude (one standard deviation) of the fine surface texture.
pub const TEXTURE_AMPLITUDE: f64 = 0.03;
const TEXTURE_SIGMA: f64 = 1.5;

/// Reflectance in band order Red, Green, Blue, NIR, RedEdge.
pub const SOIL: [f64; 5] = [0.30, 0.25, 0.20, 0.35, 0.25];
pub const CROP: [f64; 5] = [0.08, 0.15, 0.05, 0.55, 0.35];
pub const WEED: [f64; 5] = [0.04, 0.10, 0.06, 0.70, 0.42];

/// Reflectance per raw count; raw brightness = reflectance / gain.
pub const SENSOR_GAIN: [f64; 5] = [0.0040, 0.0036, 0.0044, 0.0030, 0.0033];

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn noisy(rng: &mut ChaCha8Rng, noise: &Normal<f64>, value: f64) -> f32 {
    let v = if rng.random::<f64>() < IMPULSE_PROBABILITY {
        if rng.random::<bool>() {
            1.0
        } else {
            0.0
        }
    } else {
        value + noise.sample(rng)
    };
    v.clamp(0.0, 1.0) as f32
}

/// Reflectance image (five bands in `[0, 1]`) and its ground-truth labels.
pub fn generate_synthetic_field(seed: u64, size: usize) -> Result<(MultispectralImage, LabelMask), PipelineError> {
    if size < MIN_FIELD_SIZE {
        return Err(PipelineError::SizeTooSmall { size, min: MIN_FIELD_SIZE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;

    let angle: f64 = rng.random_range(-0.2..0.2);
    let period: f64 = rng.random_range(40.0..56.0);
    let half_width = period * rng.random_range(0.12..0.16);
    let phase = rng.random_range(0.0..period);
    let wobble = rng.random_range(1.0..3.0);
    let wavelength = rng.random_range(80.0..160.0);

    let weed_count = (0.035 * s * s / (PI * 9.5 * 9.5)).round() as usize;
    let weeds: Vec<Ellipse> = (0..weed_count)
        .map(|_| {
            let t: f64 = rng.random_range(0.0..PI);
            Ellipse {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                a: rng.random_range(5.0..14.0),
                b: rng.random_range(5.0..14.0),
                cos: t.cos(),
                sin: t.sin(),
            }
        })
        .collect();

    // slow soil brightness variation, ±10%
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(-PI..PI), rng.random_range(150.0..400.0), rng.random_range(0.0..2.0 * PI)))
        .collect();

    let mut weed_mask = vec![false; size * size];
    for e in &weeds {
        let r = e.a.max(e.b);
        let x0 = (e.cx - r).floor().max(0.0) as usize;
        let y0 = (e.cy - r).floor().max(0.0) as usize;
        let x1 = ((e.cx + r).ceil() as usize).min(size - 1);
        let y1 = ((e.cy + r).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains(x as f64, y as f64) {
                    weed_mask[y * size + x] = true;
                }
            }
        }
    }

    // fine clod/leaf texture shared by all bands; its own stream keeps the
    // layout independent of it
    let texture = {
        let mut trng = ChaCha8Rng::seed_from_u64(seed);
        trng.set_stream(2);
        let white: Vec<f32> = (0..size * size).map(|_| trng.random::<f32>() - 0.5).collect();
        let t = gaussian_blur(&white, size, size, TEXTURE_SIGMA);
        let sd = (t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
        t.into_iter().map(|v| TEXTURE_AMPLITUDE * v as f64 / sd).collect::<Vec<f64>>()
    };

    let (ca, sa) = (angle.cos(), angle.sin());
    let mut classes = vec![Class::Background as u8; size * size];
    let mut bands: Vec<Vec<f32>> = (0..5).map(|_| Vec::with_capacity(size * size)).collect();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let across = xf * ca + yf * sa;
            let along = -xf * sa + yf * ca;
            let d = (across + phase + wobble * (2.0 * PI * along / wavelength).sin()).rem_euclid(period) - period / 2.0;
            let class = if weed_mask[y * size + x] {
                Class::Weed
            } else if d.abs() < half_width {
                Class::Crop
            } else {
                Class::Background
            };
            classes[y * size + x] = class as u8;
            let profile = match class {
                Class::Background => {
                    let v: f64 = waves
                        .iter()
                        .map(|&(dir, len, ph)| (2.0 * PI * (xf * dir.cos() + yf * dir.sin()) / len + ph).sin())
                        .sum::<f64>()
                        / 3.0;
                    SOIL.map(|r| r * (1.0 + 0.1 * v))
                }
                Class::Crop => CROP,
                Class::Weed => WEED,
            };
            let shade = 1.0 + texture[y * size + x];
            for (b, &r) in bands.iter_mut().zip(&profile) {
                b.push(noisy(&mut rng, &noise, r * shade));
            }
        }
    }
    let image = MultispectralImage::new(
        BandKind::ALL.iter().zip(bands).map(|(&k, v)| Band::new(k, size, size, v)).collect::<Result<_, _>>()?,
    )?;
    Ok((image, LabelMask::new(size, size, classes)?))
}

/// Uniform reference panel of known reflectance with sensor noise, as a
/// reflectance image.
pub fn synthetic_panel(seed: u64) -> Result<MultispectralImage, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let bands = BandKind::ALL
        .iter()
        .map(|&k| {
            let v = (0..PANEL_SIZE * PANEL_SIZE).map(|_| (PANEL_REFLECTANCE + noise.sample(&mut rng)) as f32).collect();
            Band::new(k, PANEL_SIZE, PANEL_SIZE, v)
        })
        .collect::<Result<_, _>>()?;
    Ok(MultispectralImage::new(bands)?)
}

/// Converts reflectance to raw sensor brightness using [`SENSOR_GAIN`].
pub fn to_raw_brightness(reflectance: &MultispectralImage) -> Result<MultispectralImage, PipelineError> {
    reflectance.try_map_bands(|b| {
        let g = SENSOR_GAIN[b.kind().code() as usize];
        Ok::<_, PipelineError>(b.map_valid(|v| (v as f64 / g) as f32))
    })
}
