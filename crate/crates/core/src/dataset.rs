//! Sliding-window tiling, seeded train/val/test splits, six-variant
//! augmentation and stitching of per-tile predictions back into a map.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::filters::masked_gaussian_blur;
use crate::indices::{FeatureStack, IndexError};
use crate::raster::{self, Class, LabelMask, RasterError, CLASS_COUNT};

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.1;
pub const MIN_SPLIT_TILES: usize = 10;
pub const AUGMENT_BLUR_SIGMA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("tile size {tile} exceeds image {width}x{height}")]
    TileLargerThanImage { tile: usize, width: usize, height: usize },
    #[error("stride {stride} must be in 1..={tile}")]
    InvalidStride { stride: usize, tile: usize },
    #[error("features are {features:?} but labels are {labels:?}")]
    DimensionMismatch { features: (usize, usize), labels: (usize, usize) },
    #[error("split needs at least {MIN_SPLIT_TILES} tiles, got {0}")]
    TooFewTiles(usize),
    #[error("augmentation needs a square tile, got {width}x{height}")]
    NonSquareTile { width: usize, height: usize },
    #[error("patch at ({x}, {y}) of size {width}x{height} does not fit the {canvas_width}x{canvas_height} canvas")]
    PatchOutOfBounds { x: usize, y: usize, width: usize, height: usize, canvas_width: usize, canvas_height: usize },
    #[error("probability patch planes do not match its dimensions")]
    MalformedPatch,
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Augmentation {
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    Blur,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Augmentation::Rot90,
        Augmentation::Rot180,
        Augmentation::Rot270,
        Augmentation::FlipHorizontal,
        Augmentation::FlipVertical,
        Augmentation::Blur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Augmentation::Rot90 => "rot90",
            Augmentation::Rot180 => "rot180",
            Augmentation::Rot270 => "rot270",
            Augmentation::FlipHorizontal => "fliph",
            Augmentation::FlipVertical => "flipv",
            Augmentation::Blur => "blur",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Source pixel for output pixel `(x, y)` of an `n`×`n` tile, or `None`
    /// for the non-geometric variant.
    fn source(self, x: usize, y: usize, n: usize) -> Option<(usize, usize)> {
        let m = n - 1;
        Some(match self {
            // counter-clockwise on screen: input (x, y) lands at (y, m - x)
            Augmentation::Rot90 => (m - y, x),
            Augmentation::Rot180 => (m - x, m - y),
            Augmentation::Rot270 => (y, m - x),
            Augmentation::FlipHorizontal => (m - x, y),
            Augmentation::FlipVertical => (x, m - y),
            Augmentation::Blur => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub features: FeatureStack,
    pub labels: LabelMask,
    pub origin: (usize, usize),
    pub source_id: String,
    pub variant: Option<Augmentation>,
}

impl Tile {
    /// `<source_id>_x<ox>_y<oy>`, with `_<variant>` appended for augmented copies.
    pub fn id(&self) -> String {
        let mut id = format!("{}_x{}_y{}", self.source_id, self.origin.0, self.origin.1);
        if let Some(v) = self.variant {
            id.push('_');
            id.push_str(v.name());
        }
        id
    }

    pub fn size(&self) -> (usize, usize) {
        (self.features.width(), self.features.height())
    }

    /// Writes `<dir>/<id>.msr` and `<dir>/<id>.msl`.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let id = self.id();
        self.features.write(&dir.join(format!("{id}.msr")))?;
        raster::write_labels(&self.labels, &dir.join(format!("{id}.msl")))?;
        Ok(())
    }

    pub fn load(dir: &Path, id: &str) -> Result<Tile, DatasetError> {
        let (source_id, origin, variant) = parse_tile_id(id)?;
        let features = FeatureStack::read(&dir.join(format!("{id}.msr")))?;
        let labels = raster::read_labels(&dir.join(format!("{id}.msl")))?;
        check_dims(&features, &labels)?;
        Ok(Tile { features, labels, origin, source_id, variant })
    }
}

/// Splits a tile id into source id, origin and optional variant.
pub fn parse_tile_id(id: &str) -> Result<(String, (usize, usize), Option<Augmentation>), DatasetError> {
    let bad = || DatasetError::Parse(format!("malformed tile id {id:?}"));
    let mut parts: Vec<&str> = id.split('_').collect();
    let variant = match parts.last().and_then(|p| Augmentation::from_name(p)) {
        Some(v) => {
            parts.pop();
            Some(v)
        }
        None => None,
    };
    if parts.len() < 3 {
        return Err(bad());
    }
    let oy = parts.pop().and_then(|p| p.strip_prefix('y')).and_then(|p| p.parse().ok()).ok_or_else(bad)?;
    let ox = parts.pop().and_then(|p| p.strip_prefix('x')).and_then(|p| p.parse().ok()).ok_or_else(bad)?;
    Ok((parts.join("_"), (ox, oy), variant))
}

fn check_dims(stack: &FeatureStack, labels: &LabelMask) -> Result<(), DatasetError> {
    if stack.width() != labels.width() || stack.height() != labels.height() {
        return Err(DatasetError::DimensionMismatch {
            features: (stack.width(), stack.height()),
            labels: (labels.width(), labels.height()),
        });
    }
    Ok(())
}

fn axis_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    (0..=(extent - tile) / stride).map(|i| i * stride).collect()
}

fn check_tiling(width: usize, height: usize, tile: usize, stride: usize) -> Result<(), DatasetError> {
    if tile == 0 || tile > width || tile > height {
        return Err(DatasetError::TileLargerThanImage { tile, width, height });
    }
    if stride == 0 || stride > tile {
        return Err(DatasetError::InvalidStride { stride, tile });
    }
    Ok(())
}

/// Row-major origins of every full tile on the stride grid.
pub fn tile_origins(
    width: usize,
    height: usize,
    tile: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>, DatasetError> {
    check_tiling(width, height, tile, stride)?;
    let xs = axis_origins(width, tile, stride);
    let ys = axis_origins(height, tile, stride);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Like [`tile_origins`], plus a column/row anchored at the far edge when
/// the stride grid stops short of it, so that every pixel is covered.
pub fn inference_origins(
    width: usize,
    height: usize,
    tile: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>, DatasetError> {
    check_tiling(width, height, tile, stride)?;
    let anchored = |extent: usize| {
        let mut o = axis_origins(extent, tile, stride);
        if *o.last().unwrap() + tile < extent {
            o.push(extent - tile);
        }
        o
    };
    let (xs, ys) = (anchored(width), anchored(height));
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Cuts full `tile`×`tile` windows at multiples of `stride`; partial
/// border windows are dropped.
pub fn tile_image(
    stack: &FeatureStack,
    labels: &LabelMask,
    source_id: &str,
    tile: usize,
    stride: usize,
) -> Result<Vec<Tile>, DatasetError> {
    check_dims(stack, labels)?;
    let origins = tile_origins(stack.width(), stack.height(), tile, stride)?;
    Ok(origins
        .par_iter()
        .map(|&(x, y)| Tile {
            features: stack.crop(x, y, tile, tile),
            labels: labels.crop(x, y, tile, tile),
            origin: (x, y),
            source_id: source_id.to_string(),
            variant: None,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Uniform draw from `0..bound` without modulo bias.
fn below(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    let zone = u64::MAX - u64::MAX % bound;
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % bound;
        }
    }
}

/// Fisher–Yates shuffle driven by ChaCha8 seeded with `seed`, then
/// contiguous train/val/test slices of ⌊0.7n⌋, ⌊0.1n⌋ and the remainder.
pub fn split_tiles(tile_ids: &[String], seed: u64) -> Result<SplitManifest, DatasetError> {
    let n = tile_ids.len();
    if n < MIN_SPLIT_TILES {
        return Err(DatasetError::TooFewTiles(n));
    }
    let mut ids = tile_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = below(&mut rng, i as u64 + 1) as usize;
        ids.swap(i, j);
    }
    // integer arithmetic keeps the floors exact
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(SplitManifest { seed, train: ids, val, test })
}

impl SplitManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("seed={}\n", self.seed);
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                let _ = writeln!(s, "{name} {id}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let seed = lines
            .next()
            .and_then(|l| l.trim().strip_prefix("seed="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DatasetError::Parse("manifest must start with seed=<n>".into()))?;
        let mut m = SplitManifest { seed, train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for line in lines {
            let (split, id) = line
                .trim()
                .split_once(' ')
                .ok_or_else(|| DatasetError::Parse(format!("bad manifest line {line:?}")))?;
            match split {
                "train" => m.train.push(id.to_string()),
                "val" => m.val.push(id.to_string()),
                "test" => m.test.push(id.to_string()),
                _ => return Err(DatasetError::Parse(format!("unknown split {split:?}"))),
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_text())
            .map_err(|source| RasterError::IoFailure { path: path.display().to_string(), source }.into())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| {
            DatasetError::from(RasterError::IoFailure { path: path.display().to_string(), source })
        })?;
        Self::from_text(&text)
    }
}

fn remap<T: Copy>(plane: &[T], n: usize, aug: Augmentation) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = aug.source(x, y, n).expect("geometric variant");
            out.push(plane[sy * n + sx]);
        }
    }
    out
}

fn apply_augmentation(tile: &Tile, aug: Augmentation) -> Result<Tile, DatasetError> {
    let n = tile.features.width();
    let stack = &tile.features;
    let (features, labels) = if aug == Augmentation::Blur {
        let channels =
            stack.channels().iter().map(|c| masked_gaussian_blur(c, stack.valid(), n, n, AUGMENT_BLUR_SIGMA)).collect();
        (FeatureStack::from_planes(n, n, channels, stack.valid().to_vec())?, tile.labels.clone())
    } else {
        let channels = stack.channels().iter().map(|c| remap(c, n, aug)).collect();
        let valid = remap(stack.valid(), n, aug);
        let labels = LabelMask::new(n, n, remap(tile.labels.classes(), n, aug))?;
        (FeatureStack::from_planes(n, n, channels, valid)?, labels)
    };
    Ok(Tile { features, labels, origin: tile.origin, source_id: tile.source_id.clone(), variant: Some(aug) })
}

/// The six fixed variants: 90°, 180°, 270° counter-clockwise rotations,
/// horizontal and vertical flips, and a σ=1 blur of the features only.
pub fn augment_tile(tile: &Tile) -> Result<Vec<Tile>, DatasetError> {
    let (w, h) = tile.size();
    if w != h {
        return Err(DatasetError::NonSquareTile { width: w, height: h });
    }
    Augmentation::ALL.par_iter().map(|&a| apply_augmentation(tile, a)).collect()
}

/// Class-probability planes for one window of a larger canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityPatch {
    pub origin: (usize, usize),
    pub width: usize,
    pub height: usize,
    pub probabilities: [Vec<f32>; CLASS_COUNT],
}

/// Averages the probabilities of every patch covering a pixel and takes
/// the argmax, ties going to the lowest class; uncovered pixels are
/// background.
pub fn stitch_predictions(
    patches: &[ProbabilityPatch],
    width: usize,
    height: usize,
) -> Result<LabelMask, DatasetError> {
    let mut sums = vec![[0.0f64; CLASS_COUNT]; width * height];
    let mut counts = vec![0u32; width * height];
    for p in patches {
        let (x0, y0) = p.origin;
        if x0 + p.width > width || y0 + p.height > height {
            return Err(DatasetError::PatchOutOfBounds {
                x: x0,
                y: y0,
                width: p.width,
                height: p.height,
                canvas_width: width,
                canvas_height: height,
            });
        }
        if p.probabilities.iter().any(|c| c.len() != p.width * p.height) {
            return Err(DatasetError::MalformedPatch);
        }
        for y in 0..p.height {
            for x in 0..p.width {
                let i = (y0 + y) * width + x0 + x;
                for (c, plane) in p.probabilities.iter().enumerate() {
                    sums[i][c] += plane[y * p.width + x] as f64;
                }
                counts[i] += 1;
            }
        }
    }
    let classes = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n == 0 {
                return Class::Background as u8;
            }
            let mean = s.map(|v| v / n as f64);
            let mut best = 0;
            for c in 1..CLASS_COUNT {
                if mean[c] > mean[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(LabelMask::new(width, height, classes)?)
}
