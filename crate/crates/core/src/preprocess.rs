//! Denoising, brightness standardization and reference-panel reflectance
//! calibration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{Band, BandKind, MultispectralImage, RasterError};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("band has no valid pixels")]
    EmptyBand,
    #[error("median radius must be at least 1, got {0}")]
    InvalidRadius(usize),
    #[error("band {0} is degenerate (fewer than two valid pixels or zero variance)")]
    DegenerateBand(BandKind),
    #[error("panel region {0:?} is empty, outside the image, or has no valid pixels")]
    EmptyRegion(Rect),
    #[error("mean brightness of band {0} in the panel region is not positive")]
    ZeroBrightness(BandKind),
    #[error("no calibration factor for band {0}")]
    MissingBandFactor(BandKind),
    #[error("panel reflectance for band {band} must lie in (0, 1], got {value}")]
    InvalidReflectance { band: BandKind, value: f64 },
    #[error("calibration file: {0}")]
    Parse(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Axis-aligned pixel rectangle `[x, x+width) × [y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Rect { x, y, width, height }
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        self.width > 0 && self.height > 0 && self.x + self.width <= width && self.y + self.height <= height
    }
}

/// Median of the valid pixels in each `(2r+1)²` window.
///
/// Coordinates outside the raster are clamped to the nearest edge pixel.
/// A window with an even number of valid samples yields the mean of the two
/// middle values. Output pixels are invalid only when their whole window is.
pub fn median_filter(band: &Band, radius: usize) -> Result<Band, PreprocessError> {
    if radius == 0 {
        return Err(PreprocessError::InvalidRadius(radius));
    }
    if band.valid_count() == 0 {
        return Err(PreprocessError::EmptyBand);
    }
    let (w, h) = (band.width(), band.height());
    let values = band.values();
    let valid = band.valid();
    let r = radius as isize;
    let side = 2 * radius + 1;

    let rows: Vec<(Vec<f32>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut window = Vec::with_capacity(side * side);
            let mut out_v = vec![0.0f32; w];
            let mut out_m = vec![false; w];
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let i = sy * w + sx;
                        if valid[i] {
                            window.push(values[i]);
                        }
                    }
                }
                if window.is_empty() {
                    continue;
                }
                out_v[x] = median_in_place(&mut window);
                out_m[x] = true;
            }
            (out_v, out_m)
        })
        .collect();

    let mut out_values = Vec::with_capacity(w * h);
    let mut out_valid = Vec::with_capacity(w * h);
    for (v, m) in rows {
        out_values.extend(v);
        out_valid.extend(m);
    }
    Ok(Band::with_mask(band.kind(), w, h, out_values, out_valid)?)
}

fn median_in_place(window: &mut [f32]) -> f32 {
    let n = window.len();
    let mid = n / 2;
    let (lower, upper_mid, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
    let upper_mid = *upper_mid;
    if n % 2 == 1 {
        upper_mid
    } else {
        let lower_mid = lower.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        ((lower_mid as f64 + upper_mid as f64) / 2.0) as f32
    }
}

/// Mean and population standard deviation of one band's valid pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormalizationStats {
    pub fn of(band: &Band) -> Result<Self, PreprocessError> {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for (&v, &ok) in band.values().iter().zip(band.valid()) {
            if ok {
                n += 1;
                sum += v as f64;
            }
        }
        if n < 2 {
            return Err(PreprocessError::DegenerateBand(band.kind()));
        }
        let mu = sum / n as f64;
        let ss: f64 =
            band.values().iter().zip(band.valid()).filter(|(_, &ok)| ok).map(|(&v, _)| (v as f64 - mu).powi(2)).sum();
        let sigma = (ss / n as f64).sqrt();
        if !(sigma > 0.0) {
            return Err(PreprocessError::DegenerateBand(band.kind()));
        }
        Ok(NormalizationStats { mu, sigma })
    }

    pub fn restore(&self, normalized: f64) -> f64 {
        self.mu + self.sigma * normalized
    }
}

/// Standardizes valid pixels to `(I - μ) / σ` with population σ.
pub fn normalize_band(band: &Band) -> Result<(Band, NormalizationStats), PreprocessError> {
    let stats = NormalizationStats::of(band)?;
    let out = band.map_valid(|v| ((v as f64 - stats.mu) / stats.sigma) as f32);
    Ok((out, stats))
}

/// Panel calibration for one band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandCalibration {
    pub r_target: f64,
    pub i_measured: f64,
    pub c_calibration: f64,
}

impl BandCalibration {
    pub fn new(band: BandKind, r_target: f64, i_measured: f64) -> Result<Self, PreprocessError> {
        if !(r_target > 0.0 && r_target <= 1.0) {
            return Err(PreprocessError::InvalidReflectance { band, value: r_target });
        }
        if !(i_measured > 0.0 && i_measured.is_finite()) {
            return Err(PreprocessError::ZeroBrightness(band));
        }
        Ok(BandCalibration { r_target, i_measured, c_calibration: r_target / i_measured })
    }
}

/// Per-band calibration factors derived from a reference panel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationRecord {
    bands: BTreeMap<BandKind, BandCalibration>,
}

impl CalibrationRecord {
    pub fn from_bands(bands: BTreeMap<BandKind, BandCalibration>) -> Self {
        CalibrationRecord { bands }
    }

    pub fn get(&self, kind: BandKind) -> Option<&BandCalibration> {
        self.bands.get(&kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = (BandKind, &BandCalibration)> {
        self.bands.iter().map(|(&k, v)| (k, v))
    }

    /// `band.<kind>.r_target` / `band.<kind>.i_measured` lines; factors are
    /// not stored.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (kind, cal) in &self.bands {
            let _ = writeln!(s, "band.{kind}.r_target={}", cal.r_target);
            let _ = writeln!(s, "band.{kind}.i_measured={}", cal.i_measured);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PreprocessError> {
        let mut partial: BTreeMap<BandKind, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| PreprocessError::Parse(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let mut parts = key.trim().split('.');
            let (Some("band"), Some(kind), Some(field), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected band.<kind>.<field>"));
            };
            let kind = BandKind::from_name(kind).ok_or_else(|| bad("unknown band"))?;
            let value: f64 = value.trim().parse().map_err(|_| bad("not a number"))?;
            let entry = partial.entry(kind).or_default();
            match field {
                "r_target" => entry.0 = Some(value),
                "i_measured" => entry.1 = Some(value),
                _ => return Err(bad("unknown field")),
            }
        }
        let mut bands = BTreeMap::new();
        for (kind, (r, i)) in partial {
            let (Some(r), Some(i)) = (r, i) else {
                return Err(PreprocessError::Parse(format!("band {kind} needs both r_target and i_measured")));
            };
            bands.insert(kind, BandCalibration::new(kind, r, i)?);
        }
        Ok(CalibrationRecord { bands })
    }

    pub fn save(&self, path: &Path) -> Result<(), PreprocessError> {
        fs::write(path, self.to_text())
            .map_err(|e| RasterError::IoFailure { path: path.display().to_string(), source: e }.into())
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RasterError::IoFailure { path: path.display().to_string(), source: e })?;
        Self::from_text(&text)
    }
}

fn region_mean(band: &Band, region: Rect) -> Option<f64> {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for y in region.y..region.y + region.height {
        for x in region.x..region.x + region.width {
            if band.is_valid(x, y) {
                n += 1;
                sum += band.get(x, y) as f64;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Derives `C = R_target / I_measured` per band from one panel capture.
pub fn derive_calibration(
    panel_capture: &MultispectralImage,
    panel_region: Rect,
    r_target: &BTreeMap<BandKind, f64>,
) -> Result<CalibrationRecord, PreprocessError> {
    derive_calibration_multi(std::slice::from_ref(panel_capture), panel_region, r_target)
}

/// Same as [`derive_calibration`] over several panel captures: each
/// capture's region mean is computed and those means are averaged uniformly.
pub fn derive_calibration_multi(
    panel_captures: &[MultispectralImage],
    panel_region: Rect,
    r_target: &BTreeMap<BandKind, f64>,
) -> Result<CalibrationRecord, PreprocessError> {
    let first = panel_captures.first().ok_or(PreprocessError::EmptyRegion(panel_region))?;
    let mut bands = BTreeMap::new();
    for kind in first.kinds() {
        let mut means = Vec::with_capacity(panel_captures.len());
        for capture in panel_captures {
            if !panel_region.fits(capture.width(), capture.height()) {
                return Err(PreprocessError::EmptyRegion(panel_region));
            }
            let band = capture.band(kind).ok_or(PreprocessError::MissingBandFactor(kind))?;
            means.push(region_mean(band, panel_region).ok_or(PreprocessError::EmptyRegion(panel_region))?);
        }
        let i_measured = means.iter().sum::<f64>() / means.len() as f64;
        if !(i_measured > 0.0) {
            return Err(PreprocessError::ZeroBrightness(kind));
        }
        let r = *r_target.get(&kind).ok_or(PreprocessError::MissingBandFactor(kind))?;
        bands.insert(kind, BandCalibration::new(kind, r, i_measured)?);
    }
    Ok(CalibrationRecord { bands })
}

/// Scales every band by its calibration factor: `I_cal = I_measured · C`.
pub fn apply_calibration(
    image: &MultispectralImage,
    record: &CalibrationRecord,
) -> Result<MultispectralImage, PreprocessError> {
    image.try_map_bands(|band| {
        let cal = record.get(band.kind()).ok_or(PreprocessError::MissingBandFactor(band.kind()))?;
        let c = cal.c_calibration;
        Ok(band.map_valid(|v| (v as f64 * c) as f32))
    })
}
