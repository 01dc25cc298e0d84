//! Raster containers and the on-disk interchange formats.
//!
//! Every raster in the pipeline is planar `f32` data with a per-pixel
//! validity flag. Invalid pixels always carry a payload of `0.0`, so
//! arithmetic kernels can run over whole planes without branching and
//! consult the mask afterwards.
//!
//! Two binary formats live here:
//!
//! * **MSR** (`MSRA` magic) for multi-plane rasters. Layout, all little endian:
//!   magic `MSRA` · version `u16 = 1` · width `u32` · height `u32` ·
//!   band count `u8` · one kind byte per band · per band `width*height`
//!   `f32` values row-major followed by `width*height` validity bytes (0/1).
//! * **MSL** (`MSRL` magic) for label masks: magic · version `u16 = 1` ·
//!   width `u32` · height `u32` · `width*height` class bytes row-major.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveTime, Timelike};
use thiserror::Error;

pub const MSR_MAGIC: &[u8; 4] = b"MSRA";
pub const MSL_MAGIC: &[u8; 4] = b"MSRL";
pub const FORMAT_VERSION: u16 = 1;

const MSR_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: String, source: io::Error },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("band {0} appears more than once")]
    DuplicateBand(BandKind),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("pixel {index} of plane {plane} is flagged valid but holds a non-finite value")]
    NonFiniteValueWithValidFlag { plane: usize, index: usize },
    #[error("raster must have nonzero width and height")]
    EmptyRaster,
    #[error("plane holds {found} values, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label value {value} at pixel {index} is not a known class")]
    InvalidClass { index: usize, value: u8 },
    #[error("unknown band kind byte {0}")]
    UnknownKind(u8),
}

impl RasterError {
    fn io(path: &Path, source: io::Error) -> Self {
        RasterError::IoFailure { path: path.display().to_string(), source }
    }
}

/// Spectral band carried by a capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BandKind {
    Red,
    Green,
    Blue,
    Nir,
    RedEdge,
}

impl BandKind {
    pub const ALL: [BandKind; 5] = [BandKind::Red, BandKind::Green, BandKind::Blue, BandKind::Nir, BandKind::RedEdge];

    /// Kind byte used by the MSR format.
    pub fn code(self) -> u8 {
        match self {
            BandKind::Red => 0,
            BandKind::Green => 1,
            BandKind::Blue => 2,
            BandKind::Nir => 3,
            BandKind::RedEdge => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        BandKind::ALL.get(code as usize).copied()
    }

    /// Lowercase key used in text sidecars (`band.<name>.…`).
    pub fn name(self) -> &'static str {
        match self {
            BandKind::Red => "red",
            BandKind::Green => "green",
            BandKind::Blue => "blue",
            BandKind::Nir => "nir",
            BandKind::RedEdge => "rededge",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        BandKind::ALL.iter().copied().find(|k| k.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for BandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Replaces the payload of invalid pixels with `0.0` and checks that
/// every valid pixel is finite.
fn normalize_plane(values: &mut [f32], valid: &[bool], plane: usize) -> Result<(), RasterError> {
    for (index, (v, &ok)) in values.iter_mut().zip(valid).enumerate() {
        if !ok {
            *v = 0.0;
        } else if !v.is_finite() {
            return Err(RasterError::NonFiniteValueWithValidFlag { plane, index });
        }
    }
    Ok(())
}

/// One spectral plane with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    kind: BandKind,
    width: usize,
    height: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl Band {
    /// Builds a fully valid band.
    pub fn new(kind: BandKind, width: usize, height: usize, values: Vec<f32>) -> Result<Self, RasterError> {
        let valid = vec![true; values.len()];
        Self::with_mask(kind, width, height, values, valid)
    }

    pub fn with_mask(
        kind: BandKind,
        width: usize,
        height: usize,
        mut values: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyRaster);
        }
        let n = width * height;
        if values.len() != n {
            return Err(RasterError::LengthMismatch { expected: n, found: values.len() });
        }
        if valid.len() != n {
            return Err(RasterError::LengthMismatch { expected: n, found: valid.len() });
        }
        normalize_plane(&mut values, &valid, 0)?;
        Ok(Band { kind, width, height, values, valid })
    }

    /// A band where every pixel holds `value`.
    pub fn constant(kind: BandKind, width: usize, height: usize, value: f32) -> Result<Self, RasterError> {
        Self::new(kind, width, height, vec![value; width * height])
    }

    pub fn from_fn(
        kind: BandKind,
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> f32,
    ) -> Result<Self, RasterError> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(kind, width, height, values)
    }

    pub fn kind(&self) -> BandKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn with_kind(mut self, kind: BandKind) -> Self {
        self.kind = kind;
        self
    }

    /// Applies `f` to every valid pixel. Results that are not finite mark the
    /// pixel invalid.
    pub fn map_valid(&self, f: impl Fn(f32) -> f32) -> Band {
        let mut values = Vec::with_capacity(self.len());
        let mut valid = Vec::with_capacity(self.len());
        for (&v, &ok) in self.values.iter().zip(&self.valid) {
            let out = if ok { f(v) } else { 0.0 };
            let keep = ok && out.is_finite();
            values.push(if keep { out } else { 0.0 });
            valid.push(keep);
        }
        Band { kind: self.kind, width: self.width, height: self.height, values, valid }
    }

    pub fn into_parts(self) -> (Vec<f32>, Vec<bool>) {
        (self.values, self.valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Product {
    Rgb,
    Nir,
    RedEdge,
}

impl Product {
    pub fn tag(self) -> &'static str {
        match self {
            Product::Rgb => "RGB",
            Product::Nir => "NIR",
            Product::RedEdge => "RedEdge",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "RGB" => Some(Product::Rgb),
            "NIR" => Some(Product::Nir),
            "RedEdge" => Some(Product::RedEdge),
            _ => None,
        }
    }
}

/// Metadata recovered from a capture file name such as
/// `20240423_E2_1230_RGB.tif`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureMeta {
    pub date: NaiveDate,
    pub area_id: String,
    pub time: NaiveTime,
    pub product: Product,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Georef {
    pub lat: f64,
    pub lon: f64,
    pub altitude: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilenameError {
    #[error("name {0:?} does not follow YYYYMMDD_AREA_HHMM_TYPE.ext")]
    PatternMismatch(String),
    #[error("invalid date {0:?}")]
    InvalidDate(String),
    #[error("invalid time {0:?}")]
    InvalidTime(String),
    #[error("unknown product {0:?}")]
    UnknownProduct(String),
}

pub fn parse_capture_filename(name: &str) -> Result<CaptureMeta, FilenameError> {
    let mismatch = || FilenameError::PatternMismatch(name.to_string());
    let file = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let (stem, ext) = file.rsplit_once('.').ok_or_else(mismatch)?;
    if ext.is_empty() {
        return Err(mismatch());
    }
    let parts: Vec<&str> = stem.split('_').collect();
    let [date, area, time, product] = parts.as_slice() else {
        return Err(mismatch());
    };
    let all_digits = |s: &str, n: usize| s.len() == n && s.bytes().all(|b| b.is_ascii_digit());
    if !all_digits(date, 8)
        || !all_digits(time, 4)
        || area.is_empty()
        || !area.bytes().all(|b| b.is_ascii_alphanumeric())
    {
        return Err(mismatch());
    }
    let year: i32 = date[0..4].parse().map_err(|_| mismatch())?;
    let month: u32 = date[4..6].parse().map_err(|_| mismatch())?;
    let day: u32 = date[6..8].parse().map_err(|_| mismatch())?;
    let date = NaiveDate::from_ymd_opt(year, month, day).ok_or_else(|| FilenameError::InvalidDate(date.to_string()))?;
    let hour: u32 = time[0..2].parse().map_err(|_| mismatch())?;
    let minute: u32 = time[2..4].parse().map_err(|_| mismatch())?;
    let time = NaiveTime::from_hms_opt(hour, minute, 0).ok_or_else(|| FilenameError::InvalidTime(time.to_string()))?;
    let product = Product::from_tag(product).ok_or_else(|| FilenameError::UnknownProduct(product.to_string()))?;
    Ok(CaptureMeta { date, area_id: area.to_string(), time, product })
}

pub fn format_capture_filename(meta: &CaptureMeta, extension: &str) -> String {
    format!(
        "{:04}{:02}{:02}_{}_{:02}{:02}_{}.{}",
        meta.date.year(),
        meta.date.month(),
        meta.date.day(),
        meta.area_id,
        meta.time.hour(),
        meta.time.minute(),
        meta.product.tag(),
        extension
    )
}

/// A co-registered set of bands from one capture (or one mosaic).
#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralImage {
    bands: Vec<Band>,
    pub capture_meta: Option<CaptureMeta>,
    pub georef: Option<Georef>,
}

impl MultispectralImage {
    pub fn new(bands: Vec<Band>) -> Result<Self, RasterError> {
        let first = bands.first().ok_or(RasterError::EmptyRaster)?;
        let (w, h) = (first.width, first.height);
        for (i, b) in bands.iter().enumerate() {
            if b.width != w || b.height != h {
                return Err(RasterError::DimensionMismatch(format!(
                    "band {} is {}x{}, expected {}x{}",
                    b.kind, b.width, b.height, w, h
                )));
            }
            if bands[..i].iter().any(|o| o.kind == b.kind) {
                return Err(RasterError::DuplicateBand(b.kind));
            }
        }
        Ok(MultispectralImage { bands, capture_meta: None, georef: None })
    }

    pub fn width(&self) -> usize {
        self.bands[0].width
    }

    pub fn height(&self) -> usize {
        self.bands[0].height
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn band(&self, kind: BandKind) -> Option<&Band> {
        self.bands.iter().find(|b| b.kind == kind)
    }

    pub fn kinds(&self) -> Vec<BandKind> {
        self.bands.iter().map(|b| b.kind).collect()
    }

    pub fn into_bands(self) -> Vec<Band> {
        self.bands
    }

    /// Builds a new image by transforming each band, keeping metadata.
    pub fn try_map_bands<E>(&self, f: impl Fn(&Band) -> Result<Band, E>) -> Result<Self, E>
    where
        E: From<RasterError>,
    {
        let bands = self.bands.iter().map(f).collect::<Result<Vec<_>, E>>()?;
        let mut out = MultispectralImage::new(bands)?;
        out.capture_meta = self.capture_meta.clone();
        out.georef = self.georef;
        Ok(out)
    }
}

/// Pixel class of a label mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Crop = 1,
    Weed = 2,
}

pub const CLASS_COUNT: usize = 3;

impl Class {
    pub const ALL: [Class; CLASS_COUNT] = [Class::Background, Class::Crop, Class::Weed];

    pub fn from_u8(v: u8) -> Option<Self> {
        Class::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Crop => "crop",
            Class::Weed => "weed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, classes: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyRaster);
        }
        if classes.len() != width * height {
            return Err(RasterError::LengthMismatch { expected: width * height, found: classes.len() });
        }
        if let Some((index, &value)) = classes.iter().enumerate().find(|(_, &c)| c as usize >= CLASS_COUNT) {
            return Err(RasterError::InvalidClass { index, value });
        }
        Ok(LabelMask { width, height, classes })
    }

    pub fn filled(width: usize, height: usize, class: Class) -> Result<Self, RasterError> {
        Self::new(width, height, vec![class as u8; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: Class) {
        self.classes[y * self.width + x] = class as u8;
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> [usize; CLASS_COUNT] {
        let mut h = [0; CLASS_COUNT];
        for &c in &self.classes {
            h[c as usize] += 1;
        }
        h
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> LabelMask {
        let mut classes = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            classes.extend_from_slice(&self.classes[y * self.width + x0..y * self.width + x0 + width]);
        }
        LabelMask { width, height, classes }
    }
}

/// One raw plane of an MSR file; `kind` is the raw kind byte, which lets
/// feature stacks reuse the container with index tags 5..=9.
#[derive(Debug, Clone, PartialEq)]
pub struct MsrPlane {
    pub kind: u8,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsrFile {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<MsrPlane>,
}

pub fn encode_msr(file: &MsrFile) -> Vec<u8> {
    let n = file.width * file.height;
    let mut out = Vec::with_capacity(MSR_HEADER_LEN + file.planes.len() * (1 + 5 * n));
    out.extend_from_slice(MSR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(file.width as u32).to_le_bytes());
    out.extend_from_slice(&(file.height as u32).to_le_bytes());
    out.push(file.planes.len() as u8);
    for p in &file.planes {
        out.push(p.kind);
    }
    for p in &file.planes {
        for (&v, &ok) in p.values.iter().zip(&p.valid) {
            let v = if ok { v } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(p.valid.iter().map(|&ok| ok as u8));
    }
    out
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(bytes: &[u8], magic: &[u8; 4], min_len: usize) -> Result<(usize, usize), RasterError> {
    if bytes.len() < min_len {
        return Err(RasterError::MalformedHeader(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[0..4] != magic {
        return Err(RasterError::MalformedHeader("bad magic".into()));
    }
    let version = read_u16(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(RasterError::MalformedHeader(format!("unsupported version {version}")));
    }
    let width = read_u32(bytes, 6) as usize;
    let height = read_u32(bytes, 10) as usize;
    if width == 0 || height == 0 {
        return Err(RasterError::MalformedHeader(format!("empty raster {width}x{height}")));
    }
    Ok((width, height))
}

pub fn decode_msr(bytes: &[u8]) -> Result<MsrFile, RasterError> {
    let (width, height) = check_header(bytes, MSR_MAGIC, MSR_HEADER_LEN)?;
    let count = bytes[14] as usize;
    if count == 0 {
        return Err(RasterError::MalformedHeader("zero bands".into()));
    }
    let kinds_end = MSR_HEADER_LEN + count;
    if bytes.len() < kinds_end {
        return Err(RasterError::MalformedHeader("band table truncated".into()));
    }
    let kinds = &bytes[MSR_HEADER_LEN..kinds_end];
    let n = width.checked_mul(height).ok_or_else(|| RasterError::MalformedHeader("dimensions overflow".into()))?;
    let expected = kinds_end + count * n * 5;
    if bytes.len() < expected {
        return Err(RasterError::TruncatedPayload { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(RasterError::MalformedHeader(format!("{} trailing bytes after payload", bytes.len() - expected)));
    }
    let mut planes = Vec::with_capacity(count);
    let mut at = kinds_end;
    for (plane, &kind) in kinds.iter().enumerate() {
        let values: Vec<f32> =
            bytes[at..at + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        at += 4 * n;
        let mut valid = Vec::with_capacity(n);
        for &b in &bytes[at..at + n] {
            match b {
                0 => valid.push(false),
                1 => valid.push(true),
                other => return Err(RasterError::MalformedHeader(format!("validity byte {other} in plane {plane}"))),
            }
        }
        at += n;
        for (index, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok && !v.is_finite() {
                return Err(RasterError::NonFiniteValueWithValidFlag { plane, index });
            }
        }
        planes.push(MsrPlane { kind, values, valid });
    }
    Ok(MsrFile { width, height, planes })
}

pub fn read_msr(path: &Path) -> Result<MsrFile, RasterError> {
    let bytes = fs::read(path).map_err(|e| RasterError::io(path, e))?;
    decode_msr(&bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RasterError> {
    let mut f = fs::File::create(path).map_err(|e| RasterError::io(path, e))?;
    f.write_all(bytes).map_err(|e| RasterError::io(path, e))
}

impl MultispectralImage {
    pub fn to_msr(&self) -> MsrFile {
        MsrFile {
            width: self.width(),
            height: self.height(),
            planes: self
                .bands
                .iter()
                .map(|b| MsrPlane { kind: b.kind.code(), values: b.values.clone(), valid: b.valid.clone() })
                .collect(),
        }
    }

    pub fn from_msr(file: MsrFile) -> Result<Self, RasterError> {
        let mut bands = Vec::with_capacity(file.planes.len());
        for p in file.planes {
            let kind = BandKind::from_code(p.kind).ok_or(RasterError::UnknownKind(p.kind))?;
            if bands.iter().any(|b: &Band| b.kind == kind) {
                return Err(RasterError::DuplicateBand(kind));
            }
            bands.push(Band::with_mask(kind, file.width, file.height, p.values, p.valid)?);
        }
        MultispectralImage::new(bands)
    }
}

/// Reads an MSR raster holding spectral bands (kind bytes 0..=4).
pub fn read_raster(path: &Path) -> Result<MultispectralImage, RasterError> {
    MultispectralImage::from_msr(read_msr(path)?)
}

pub fn write_raster(image: &MultispectralImage, path: &Path) -> Result<(), RasterError> {
    write_bytes(path, &encode_msr(&image.to_msr()))
}

pub fn encode_labels(mask: &LabelMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + mask.classes.len());
    out.extend_from_slice(MSL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(mask.width as u32).to_le_bytes());
    out.extend_from_slice(&(mask.height as u32).to_le_bytes());
    out.extend_from_slice(&mask.classes);
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMask, RasterError> {
    let (width, height) = check_header(bytes, MSL_MAGIC, 14)?;
    let expected = 14 + width * height;
    if bytes.len() < expected {
        return Err(RasterError::TruncatedPayload { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(RasterError::MalformedHeader("trailing bytes after label payload".into()));
    }
    LabelMask::new(width, height, bytes[14..].to_vec())
}

pub fn read_labels(path: &Path) -> Result<LabelMask, RasterError> {
    let bytes = fs::read(path).map_err(|e| RasterError::io(path, e))?;
    decode_labels(&bytes)
}

pub fn write_labels(mask: &LabelMask, path: &Path) -> Result<(), RasterError> {
    write_bytes(path, &encode_labels(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn minimal_single_band_file() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MSRA");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(1);
        bytes.push(0);
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.push(1);
        let dir = tmp();
        let path = dir.path().join("one.msr");
        fs::write(&path, &bytes).unwrap();
        let img = read_raster(&path).unwrap();
        assert_eq!(img.bands().len(), 1);
        assert_eq!(img.band(BandKind::Red).unwrap().get(0, 0), 0.5);
        // writing reproduces the exact bytes
        assert_eq!(encode_msr(&img.to_msr()), bytes);
    }

    #[test]
    fn zero_value_round_trip() {
        let dir = tmp();
        let path = dir.path().join("z.msr");
        let img = MultispectralImage::new(vec![Band::constant(BandKind::Nir, 1, 1, 0.0).unwrap()]).unwrap();
        write_raster(&img, &path).unwrap();
        assert_eq!(read_raster(&path).unwrap(), img);
    }

    #[test]
    fn nan_under_invalid_flag_is_normalized() {
        let band = Band::with_mask(BandKind::Red, 2, 1, vec![f32::NAN, 0.3], vec![false, true]).unwrap();
        assert_eq!(band.values()[0], 0.0);
        let img = MultispectralImage::new(vec![band]).unwrap();
        let back = MultispectralImage::from_msr(decode_msr(&encode_msr(&img.to_msr())).unwrap()).unwrap();
        let b = back.band(BandKind::Red).unwrap();
        assert_eq!(b.valid(), &[false, true]);
        assert_eq!(b.values()[0].to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn non_finite_valid_pixel_rejected() {
        assert!(matches!(
            Band::with_mask(BandKind::Red, 1, 1, vec![f32::INFINITY], vec![true]),
            Err(RasterError::NonFiniteValueWithValidFlag { .. })
        ));
        let mut bytes = encode_msr(
            &MultispectralImage::new(vec![Band::constant(BandKind::Red, 1, 1, 1.0).unwrap()]).unwrap().to_msr(),
        );
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_msr(&bytes), Err(RasterError::NonFiniteValueWithValidFlag { plane: 0, index: 0 })));
    }

    #[test]
    fn duplicate_band_rejected() {
        let file = MsrFile {
            width: 1,
            height: 1,
            planes: vec![
                MsrPlane { kind: 3, values: vec![0.1], valid: vec![true] },
                MsrPlane { kind: 3, values: vec![0.2], valid: vec![true] },
            ],
        };
        let err = MultispectralImage::from_msr(decode_msr(&encode_msr(&file)).unwrap()).unwrap_err();
        assert!(matches!(err, RasterError::DuplicateBand(BandKind::Nir)));
    }

    #[test]
    fn truncated_and_malformed_files() {
        let img = MultispectralImage::new(vec![Band::constant(BandKind::Red, 3, 2, 0.2).unwrap()]).unwrap();
        let bytes = encode_msr(&img.to_msr());
        assert!(matches!(decode_msr(&bytes[..bytes.len() - 1]), Err(RasterError::TruncatedPayload { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_msr(&bad), Err(RasterError::MalformedHeader(_))));
        assert!(matches!(decode_msr(&bytes[..8]), Err(RasterError::MalformedHeader(_))));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let img = MultispectralImage::new(vec![Band::constant(BandKind::Red, 1, 1, 0.0).unwrap()]).unwrap();
        let err = write_raster(&img, Path::new("/nonexistent-dir/x/y.msr")).unwrap_err();
        assert!(matches!(err, RasterError::IoFailure { .. }));
    }

    #[test]
    fn mismatched_band_sizes_rejected() {
        let a = Band::constant(BandKind::Red, 2, 2, 0.0).unwrap();
        let b = Band::constant(BandKind::Green, 3, 2, 0.0).unwrap();
        assert!(matches!(MultispectralImage::new(vec![a, b]), Err(RasterError::DimensionMismatch(_))));
    }

    #[test]
    fn capture_filename_examples() {
        let m = parse_capture_filename("20240423_E2_1230_RGB.tif").unwrap();
        assert_eq!(m.date, NaiveDate::from_ymd_opt(2024, 4, 23).unwrap());
        assert_eq!(m.area_id, "E2");
        assert_eq!(m.time, NaiveTime::from_hms_opt(12, 30, 0).unwrap());
        assert_eq!(m.product, Product::Rgb);

        let m = parse_capture_filename("20200101_E8_0000_NIR.tif").unwrap();
        assert_eq!(m.date, NaiveDate::from_ymd_opt(2020, 1, 1).unwrap());
        assert_eq!(m.time, NaiveTime::from_hms_opt(0, 0, 0).unwrap());
        assert_eq!(m.product, Product::Nir);

        assert!(matches!(parse_capture_filename("notes.txt"), Err(FilenameError::PatternMismatch(_))));
        assert!(matches!(parse_capture_filename("20230230_E2_1230_RGB.tif"), Err(FilenameError::InvalidDate(_))));
        assert!(matches!(parse_capture_filename("20230210_E2_2460_RGB.tif"), Err(FilenameError::InvalidTime(_))));
        assert!(matches!(parse_capture_filename("20230210_E2_1200_SWIR.tif"), Err(FilenameError::UnknownProduct(_))));
        assert!(parse_capture_filename("flights/20230210_E8_0915_RedEdge.tif").is_ok());
    }

    #[test]
    fn label_codec_rejects_unknown_class() {
        let mut bytes = encode_labels(&LabelMask::filled(2, 2, Class::Crop).unwrap());
        bytes[15] = 7;
        assert!(matches!(decode_labels(&bytes), Err(RasterError::InvalidClass { index: 1, value: 7 })));
    }

    fn arb_image() -> impl Strategy<Value = MultispectralImage> {
        (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            proptest::collection::vec((any::<f32>(), any::<bool>()), 5 * w * h).prop_map(move |px| {
                let bands = px
                    .chunks(w * h)
                    .zip(BandKind::ALL)
                    .map(|(chunk, kind)| {
                        let (values, valid): (Vec<f32>, Vec<bool>) =
                            chunk.iter().map(|&(v, ok)| (v, ok && v.is_finite())).unzip();
                        Band::with_mask(kind, w, h, values, valid).unwrap()
                    })
                    .collect();
                MultispectralImage::new(bands).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn msr_round_trip_is_bitwise(img in arb_image()) {
            for b in img.bands() {
                for (v, ok) in b.values().iter().zip(b.valid()) {
                    prop_assert!(!ok || v.is_finite());
                }
            }
            let back = MultispectralImage::from_msr(decode_msr(&encode_msr(&img.to_msr())).unwrap()).unwrap();
            for (a, b) in img.bands().iter().zip(back.bands()) {
                prop_assert_eq!(a.valid(), b.valid());
                let abits: Vec<u32> = a.values().iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u32> = b.values().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }

        #[test]
        fn filename_format_then_parse_is_identity(
            y in 1990i32..2100, mo in 1u32..13, d in 1u32..29, hh in 0u32..24, mm in 0u32..60,
            area in "[A-Z][0-9]{1,3}", p in 0usize..3,
        ) {
            let meta = CaptureMeta {
                date: NaiveDate::from_ymd_opt(y, mo, d).unwrap(),
                area_id: area,
                time: NaiveTime::from_hms_opt(hh, mm, 0).unwrap(),
                product: [Product::Rgb, Product::Nir, Product::RedEdge][p],
            };
            prop_assert_eq!(parse_capture_filename(&format_capture_filename(&meta, "tif")).unwrap(), meta);
        }
    }
}
