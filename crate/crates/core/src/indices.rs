//! Vegetation indices and the 10-channel classification feature stack.
//!
//! | index | formula |
//! |-------|---------|
//! | NDVI  | (NIR − R) / (NIR + R) |
//! | GNDVI | (NIR − G) / (NIR + G) |
//! | EVI   | 2.5 · (NIR − R) / (NIR + 6R − 7.5B + 1), clipped to ±2.5 |
//! | SAVI  | (NIR − R) / (NIR + R + L) · (1 + L) |
//! | MSAVI | (2NIR + 1 − √((2NIR + 1)² − 8(NIR − R))) / 2 |
//!
//! Pixels whose denominator magnitude falls below [`DENOMINATOR_EPS`] are
//! marked invalid with a zero payload.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{self, BandKind, MsrFile, MsrPlane, MultispectralImage, RasterError};

pub const DENOMINATOR_EPS: f64 = 1e-12;
pub const EVI_CLIP: f64 = 2.5;
pub const DEFAULT_L_FACTOR: f64 = 0.5;
pub const CHANNEL_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index {index} needs band {band}")]
    MissingBand { index: String, band: BandKind },
    #[error("feature stack: {0}")]
    Malformed(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexKind {
    Ndvi,
    Gndvi,
    Evi,
    Savi,
    Msavi,
}

impl IndexKind {
    pub const ALL: [IndexKind; 5] =
        [IndexKind::Ndvi, IndexKind::Gndvi, IndexKind::Evi, IndexKind::Savi, IndexKind::Msavi];

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Ndvi => "NDVI",
            IndexKind::Gndvi => "GNDVI",
            IndexKind::Evi => "EVI",
            IndexKind::Savi => "SAVI",
            IndexKind::Msavi => "MSAVI",
        }
    }

    /// Kind byte in the extended MSR container.
    pub fn code(self) -> u8 {
        5 + IndexKind::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn required_bands(self) -> &'static [BandKind] {
        match self {
            IndexKind::Ndvi | IndexKind::Savi | IndexKind::Msavi => &[BandKind::Nir, BandKind::Red],
            IndexKind::Gndvi => &[BandKind::Nir, BandKind::Green],
            IndexKind::Evi => &[BandKind::Nir, BandKind::Red, BandKind::Blue],
        }
    }

    /// Evaluates the index for one pixel; `None` for a vanishing denominator
    /// or a non-finite result.
    pub fn evaluate(self, nir: f64, red: f64, green: f64, blue: f64, l_factor: f64) -> Option<f64> {
        let ratio = |num: f64, den: f64| (den.abs() >= DENOMINATOR_EPS).then(|| num / den);
        let v = match self {
            IndexKind::Ndvi => ratio(nir - red, nir + red)?,
            IndexKind::Gndvi => ratio(nir - green, nir + green)?,
            IndexKind::Evi => (2.5 * ratio(nir - red, nir + 6.0 * red - 7.5 * blue + 1.0)?).clamp(-EVI_CLIP, EVI_CLIP),
            IndexKind::Savi => ratio(nir - red, nir + red + l_factor)? * (1.0 + l_factor),
            IndexKind::Msavi => {
                let a = 2.0 * nir + 1.0;
                let disc = a * a - 8.0 * (nir - red);
                if disc < 0.0 {
                    return None;
                }
                (a - disc.sqrt()) / 2.0
            }
        };
        v.is_finite().then_some(v)
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One computed index plane.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexPlane {
    pub kind: IndexKind,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

fn plane_of(image: &MultispectralImage, kind: BandKind, index: IndexKind) -> Result<(&[f32], &[bool]), IndexError> {
    let band = image.band(kind).ok_or(IndexError::MissingBand { index: index.name().into(), band: kind })?;
    Ok((band.values(), band.valid()))
}

fn warn_out_of_range(image: &MultispectralImage) {
    for band in image.bands() {
        let outside =
            band.values().iter().zip(band.valid()).filter(|(&v, &ok)| ok && !(0.0..=1.0).contains(&v)).count();
        if outside > 0 {
            log::warn!("band {}: {outside} valid pixels outside the reflectance range [0, 1]", band.kind());
        }
    }
}

pub fn compute_index(image: &MultispectralImage, kind: IndexKind, l_factor: f64) -> Result<IndexPlane, IndexError> {
    let fetch = |b: BandKind| image.band(b).map(|band| (band.values(), band.valid()));
    let nir = fetch(BandKind::Nir);
    let red = fetch(BandKind::Red);
    let green = fetch(BandKind::Green);
    let blue = fetch(BandKind::Blue);
    let needed: Vec<(&[f32], &[bool])> =
        kind.required_bands().iter().map(|&b| plane_of(image, b, kind)).collect::<Result<_, _>>()?;

    let n = image.width() * image.height();
    let (values, valid): (Vec<f32>, Vec<bool>) = (0..n)
        .into_par_iter()
        .map(|i| {
            if !needed.iter().all(|(_, m)| m[i]) {
                return (0.0, false);
            }
            let get = |p: Option<(&[f32], &[bool])>| p.map_or(0.0, |(v, _)| v[i] as f64);
            match kind.evaluate(get(nir), get(red), get(green), get(blue), l_factor) {
                Some(v) => (v as f32, true),
                None => (0.0, false),
            }
        })
        .unzip();
    Ok(IndexPlane { kind, width: image.width(), height: image.height(), values, valid })
}

/// Names of the ten stack channels in their fixed order.
pub const CHANNEL_NAMES: [&str; CHANNEL_COUNT] =
    ["Red", "Green", "Blue", "NIR", "RedEdge", "NDVI", "GNDVI", "EVI", "SAVI", "MSAVI"];

/// Five calibrated bands followed by five indices, with a shared mask that
/// is the conjunction of all ten planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    channels: Vec<Vec<f32>>,
    valid: Vec<bool>,
}

impl FeatureStack {
    /// Builds a stack from raw planes. Invalid pixels are zeroed in every
    /// channel; valid pixels must be finite.
    pub fn from_planes(
        width: usize,
        height: usize,
        mut channels: Vec<Vec<f32>>,
        valid: Vec<bool>,
    ) -> Result<Self, IndexError> {
        let n = width * height;
        if n == 0 {
            return Err(IndexError::Malformed("empty stack".into()));
        }
        if channels.len() != CHANNEL_COUNT {
            return Err(IndexError::Malformed(format!("expected {CHANNEL_COUNT} channels, got {}", channels.len())));
        }
        if valid.len() != n || channels.iter().any(|c| c.len() != n) {
            return Err(IndexError::Malformed("plane length does not match dimensions".into()));
        }
        for (plane, c) in channels.iter_mut().enumerate() {
            for (index, (v, &ok)) in c.iter_mut().zip(&valid).enumerate() {
                if !ok {
                    *v = 0.0;
                } else if !v.is_finite() {
                    return Err(RasterError::NonFiniteValueWithValidFlag { plane, index }.into());
                }
            }
        }
        Ok(FeatureStack { width, height, channels, valid })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Feature vector of pixel `i`.
    pub fn pixel(&self, i: usize) -> [f32; CHANNEL_COUNT] {
        std::array::from_fn(|c| self.channels[c][i])
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> FeatureStack {
        let rows = |plane: &[f32]| -> Vec<f32> {
            (y0..y0 + height)
                .flat_map(|y| plane[y * self.width + x0..y * self.width + x0 + width].iter().copied())
                .collect()
        };
        let valid = (y0..y0 + height)
            .flat_map(|y| self.valid[y * self.width + x0..y * self.width + x0 + width].iter().copied())
            .collect();
        FeatureStack { width, height, channels: self.channels.iter().map(|c| rows(c)).collect(), valid }
    }

    pub fn to_msr(&self) -> MsrFile {
        MsrFile {
            width: self.width,
            height: self.height,
            planes: self
                .channels
                .iter()
                .enumerate()
                .map(|(c, values)| MsrPlane { kind: c as u8, values: values.clone(), valid: self.valid.clone() })
                .collect(),
        }
    }

    /// Reads back a stack; per-plane masks are combined with AND.
    pub fn from_msr(file: MsrFile) -> Result<Self, IndexError> {
        if file.planes.len() != CHANNEL_COUNT {
            return Err(IndexError::Malformed(format!("expected 10 planes, found {}", file.planes.len())));
        }
        for (c, p) in file.planes.iter().enumerate() {
            if p.kind as usize != c {
                return Err(IndexError::Malformed(format!("plane {c} has kind byte {}", p.kind)));
            }
        }
        let n = file.width * file.height;
        let valid: Vec<bool> = (0..n).map(|i| file.planes.iter().all(|p| p.valid[i])).collect();
        let channels = file.planes.into_iter().map(|p| p.values).collect();
        FeatureStack::from_planes(file.width, file.height, channels, valid)
    }

    pub fn read(path: &Path) -> Result<Self, IndexError> {
        Self::from_msr(raster::read_msr(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), IndexError> {
        Ok(raster::write_bytes(path, &raster::encode_msr(&self.to_msr()))?)
    }
}

pub fn build_feature_stack(image: &MultispectralImage, l_factor: f64) -> Result<FeatureStack, IndexError> {
    warn_out_of_range(image);
    let mut channels = Vec::with_capacity(CHANNEL_COUNT);
    let mut valid = vec![true; image.width() * image.height()];
    for kind in BandKind::ALL {
        let band = image.band(kind).ok_or(IndexError::MissingBand { index: "feature stack".into(), band: kind })?;
        channels.push(band.values().to_vec());
        for (v, &ok) in valid.iter_mut().zip(band.valid()) {
            *v &= ok;
        }
    }
    for kind in IndexKind::ALL {
        let plane = compute_index(image, kind, l_factor)?;
        for (v, &ok) in valid.iter_mut().zip(&plane.valid) {
            *v &= ok;
        }
        channels.push(plane.values);
    }
    FeatureStack::from_planes(image.width(), image.height(), channels, valid)
}
