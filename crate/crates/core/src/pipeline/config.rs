//! `key=value` pipeline configuration with typed validation of every key.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::render::{Palette, Rgb};
use super::PipelineError;
use crate::classifier::{Architecture, TrainConfig};
use crate::preprocess::Rect;
use crate::raster::BandKind;
use crate::registration::{DetectorConfig, RansacConfig, RegistrationConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Text,
    /// Integer with a lower bound.
    Count(usize),
    Seed,
    /// Seed that falls back to the global `seed` when empty.
    OptSeed,
    Positive,
    NonNegative,
    Range(f64, f64),
    /// Reflectance in (0, 1]; empty allowed when `optional`.
    Reflectance {
        optional: bool,
    },
    Bool,
    Band,
    Color,
    Region,
    List,
    Arch,
    Scope,
}

/// Every accepted key with its default.
const SCHEMA: &[(&str, &str, Kind)] = &[
    ("out_dir", "out", Kind::Text),
    ("seed", "0", Kind::Seed),
    ("jobs", "0", Kind::Count(0)),
    ("synth.size", "1024", Kind::Count(512)),
    ("synth.seed", "", Kind::OptSeed),
    ("synth.field", "field.msr", Kind::Text),
    ("synth.labels", "labels.msl", Kind::Text),
    ("synth.panel", "panel.msr", Kind::Text),
    ("ingest.inputs", "", Kind::List),
    ("ingest.output_dir", "captures", Kind::Text),
    ("denoise.input", "field.msr", Kind::Text),
    ("denoise.output", "denoised.msr", Kind::Text),
    ("denoise.radius", "1", Kind::Count(1)),
    ("register.input", "field.msr", Kind::Text),
    ("register.output", "registered.msr", Kind::Text),
    ("register.transforms", "band_transforms.txt", Kind::Text),
    ("register.reference", "nir", Kind::Band),
    ("register.ratio", "0.75", Kind::Range(0.0, 1.0)),
    ("register.min_ncc", "0.5", Kind::Range(-1.0, 1.0)),
    ("detector.octaves", "3", Kind::Count(1)),
    ("detector.intervals", "3", Kind::Count(1)),
    ("detector.base_sigma", "1.6", Kind::Positive),
    ("detector.contrast_threshold", "0.03", Kind::NonNegative),
    ("detector.edge_ratio", "10", Kind::Positive),
    ("ransac.iterations", "2000", Kind::Count(1)),
    ("ransac.threshold", "2.0", Kind::Positive),
    ("ransac.min_inliers", "12", Kind::Count(3)),
    ("ransac.seed", "", Kind::OptSeed),
    ("mosaic.input_dir", "captures", Kind::Text),
    ("mosaic.band", "nir", Kind::Band),
    ("mosaic.plan", "mosaic_plan.txt", Kind::Text),
    ("mosaic.output", "mosaic.msr", Kind::Text),
    ("calibrate.input", "denoised.msr", Kind::Text),
    ("calibrate.panel", "panel.msr", Kind::Text),
    ("calibrate.panel_region", "", Kind::Region),
    ("calibrate.r_target", "0.5", Kind::Reflectance { optional: false }),
    ("calibrate.r_target.red", "", Kind::Reflectance { optional: true }),
    ("calibrate.r_target.green", "", Kind::Reflectance { optional: true }),
    ("calibrate.r_target.blue", "", Kind::Reflectance { optional: true }),
    ("calibrate.r_target.nir", "", Kind::Reflectance { optional: true }),
    ("calibrate.r_target.rededge", "", Kind::Reflectance { optional: true }),
    ("calibrate.record", "calibration.txt", Kind::Text),
    ("calibrate.output", "calibrated.msr", Kind::Text),
    ("features.input", "calibrated.msr", Kind::Text),
    ("features.output", "features.msr", Kind::Text),
    ("features.l_factor", "0.5", Kind::NonNegative),
    ("tile.input", "features.msr", Kind::Text),
    ("tile.labels", "labels.msl", Kind::Text),
    ("tile.source_id", "field", Kind::Text),
    ("tile.size", "512", Kind::Count(1)),
    ("tile.stride", "256", Kind::Count(1)),
    ("tile.dir", "tiles", Kind::Text),
    ("split.seed", "", Kind::OptSeed),
    ("split.manifest", "split.txt", Kind::Text),
    ("augment.index", "augmented.txt", Kind::Text),
    ("train.architecture", "linear", Kind::Arch),
    ("train.hidden", "32", Kind::Count(1)),
    ("train.learning_rate", "0.5", Kind::Positive),
    ("train.epochs", "5", Kind::Count(1)),
    ("train.batch_size", "256", Kind::Count(1)),
    ("train.l2", "0", Kind::NonNegative),
    ("train.seed", "", Kind::OptSeed),
    ("train.augment", "false", Kind::Bool),
    ("train.model", "model.txt", Kind::Text),
    ("train.loss", "loss.txt", Kind::Text),
    ("predict.input", "features.msr", Kind::Text),
    ("predict.output", "prediction.msl", Kind::Text),
    ("evaluate.prediction", "prediction.msl", Kind::Text),
    ("evaluate.labels", "labels.msl", Kind::Text),
    ("evaluate.features", "features.msr", Kind::Text),
    ("evaluate.split", "test", Kind::Scope),
    ("evaluate.output", "metrics.txt", Kind::Text),
    ("render.input", "prediction.msl", Kind::Text),
    ("render.output", "prediction.png", Kind::Text),
    ("render.background", "255,255,255", Kind::Color),
    ("render.crop", "0,255,0", Kind::Color),
    ("render.weed", "255,0,0", Kind::Color),
];

/// Which tiles of the split manifest an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalScope {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Directory of the config file; `ingest.inputs` resolve against it.
    pub base_dir: PathBuf,
    values: BTreeMap<String, String>,
    out_override: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::ConfigInvalid(msg.into())
}

fn parse_u64(key: &str, v: &str) -> Result<u64, PipelineError> {
    v.parse().map_err(|_| invalid(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64, PipelineError> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| invalid(format!("{key}: expected a number, got {v:?}")))
}

fn parse_color(key: &str, v: &str) -> Result<Rgb, PipelineError> {
    let parts: Vec<u8> = v
        .split(',')
        .map(|p| p.trim().parse::<u8>())
        .collect::<Result<_, _>>()
        .map_err(|_| invalid(format!("{key}: expected r,g,b with 0..=255 components, got {v:?}")))?;
    <[u8; 3]>::try_from(parts).map_err(|_| invalid(format!("{key}: expected three components, got {v:?}")))
}

fn parse_region(key: &str, v: &str) -> Result<Rect, PipelineError> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| invalid(format!("{key}: expected x,y,width,height, got {v:?}")))?;
    match parts.as_slice() {
        &[x, y, w, h] if w > 0 && h > 0 => Ok(Rect::new(x, y, w, h)),
        _ => Err(invalid(format!("{key}: expected x,y,width,height with nonzero size, got {v:?}"))),
    }
}

fn check(key: &str, kind: Kind, v: &str) -> Result<(), PipelineError> {
    match kind {
        Kind::Text | Kind::List => Ok(()),
        Kind::Count(min) => {
            let n = parse_u64(key, v)?;
            if (n as usize) < min {
                return Err(invalid(format!("{key}: must be at least {min}, got {n}")));
            }
            Ok(())
        }
        Kind::Seed => parse_u64(key, v).map(|_| ()),
        Kind::OptSeed => {
            if v.is_empty() {
                Ok(())
            } else {
                parse_u64(key, v).map(|_| ())
            }
        }
        Kind::Positive => match parse_f64(key, v)? {
            x if x > 0.0 => Ok(()),
            _ => Err(invalid(format!("{key}: must be positive, got {v}"))),
        },
        Kind::NonNegative => match parse_f64(key, v)? {
            x if x >= 0.0 => Ok(()),
            _ => Err(invalid(format!("{key}: must be non-negative, got {v}"))),
        },
        Kind::Range(lo, hi) => match parse_f64(key, v)? {
            x if x > lo && x <= hi => Ok(()),
            _ => Err(invalid(format!("{key}: must be in ({lo}, {hi}], got {v}"))),
        },
        Kind::Reflectance { optional } => {
            if optional && v.is_empty() {
                return Ok(());
            }
            match parse_f64(key, v)? {
                x if x > 0.0 && x <= 1.0 => Ok(()),
                _ => Err(invalid(format!("{key}: reflectance must be in (0, 1], got {v}"))),
            }
        }
        Kind::Bool => match v {
            "true" | "false" => Ok(()),
            _ => Err(invalid(format!("{key}: expected true or false, got {v:?}"))),
        },
        Kind::Band => BandKind::from_name(v).map(|_| ()).ok_or_else(|| invalid(format!("{key}: unknown band {v:?}"))),
        Kind::Color => parse_color(key, v).map(|_| ()),
        Kind::Region => {
            if v.is_empty() {
                Ok(())
            } else {
                parse_region(key, v).map(|_| ())
            }
        }
        Kind::Arch => match v {
            "linear" | "hidden" => Ok(()),
            _ => Err(invalid(format!("{key}: expected linear or hidden, got {v:?}"))),
        },
        Kind::Scope => match v {
            "train" | "val" | "test" | "all" => Ok(()),
            _ => Err(invalid(format!("{key}: expected train, val, test or all, got {v:?}"))),
        },
    }
}

impl PipelineConfig {
    /// All defaults, resolving relative paths against `base_dir`.
    pub fn defaults(base_dir: impl Into<PathBuf>) -> Self {
        let values = SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        PipelineConfig { base_dir: base_dir.into(), values, out_override: None }
    }

    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut cfg = Self::defaults(base_dir);
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(invalid(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    /// Sets one key after checking it against the schema. Call
    /// [`validate`](Self::validate) after a batch of overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let (_, _, kind) =
            SCHEMA.iter().find(|(k, _, _)| *k == key).ok_or_else(|| invalid(format!("unknown key {key:?}")))?;
        check(key, *kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Cross-key checks.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.usize("tile.stride") > self.usize("tile.size") {
            return Err(invalid(format!(
                "tile.stride ({}) must not exceed tile.size ({})",
                self.usize("tile.stride"),
                self.usize("tile.size")
            )));
        }
        Ok(())
    }

    /// Output directory given on the command line; wins over `out_dir`.
    pub fn set_out_dir(&mut self, dir: impl Into<PathBuf>) {
        self.out_override = Some(dir.into());
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} is not in the schema"))
    }

    fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated")
    }

    fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated")
    }

    fn seed_for(&self, key: &str) -> u64 {
        match self.get(key) {
            "" => self.seed(),
            v => v.parse().expect("validated"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated")
    }

    pub fn jobs(&self) -> usize {
        self.usize("jobs")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_override.clone().unwrap_or_else(|| self.base_dir.join(self.get("out_dir")))
    }

    /// Artifact path relative to the output directory.
    pub fn artifact(&self, key: &str) -> PathBuf {
        self.out_dir().join(self.get(key))
    }

    pub fn ingest_inputs(&self) -> Vec<PathBuf> {
        self.get("ingest.inputs")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| self.base_dir.join(s))
            .collect()
    }

    pub fn synth_size(&self) -> usize {
        self.usize("synth.size")
    }

    pub fn synth_seed(&self) -> u64 {
        self.seed_for("synth.seed")
    }

    pub fn split_seed(&self) -> u64 {
        self.seed_for("split.seed")
    }

    pub fn median_radius(&self) -> usize {
        self.usize("denoise.radius")
    }

    pub fn band(&self, key: &str) -> BandKind {
        BandKind::from_name(self.get(key)).expect("validated")
    }

    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            detector: DetectorConfig {
                octaves: self.usize("detector.octaves"),
                intervals: self.usize("detector.intervals"),
                base_sigma: self.f64("detector.base_sigma"),
                contrast_threshold: self.f64("detector.contrast_threshold"),
                edge_ratio: self.f64("detector.edge_ratio"),
                ..DetectorConfig::default()
            },
            ratio: self.f64("register.ratio"),
            ransac: RansacConfig {
                iterations: self.usize("ransac.iterations"),
                inlier_threshold_px: self.f64("ransac.threshold"),
                min_inliers: self.usize("ransac.min_inliers"),
                seed: self.seed_for("ransac.seed"),
            },
            min_ncc: self.f64("register.min_ncc"),
        }
    }

    pub fn panel_region(&self) -> Option<Rect> {
        match self.get("calibrate.panel_region") {
            "" => None,
            v => Some(parse_region("calibrate.panel_region", v).expect("validated")),
        }
    }

    pub fn r_target(&self, band: BandKind) -> f64 {
        match self.get(&format!("calibrate.r_target.{}", band.name())) {
            "" => self.f64("calibrate.r_target"),
            v => v.parse().expect("validated"),
        }
    }

    pub fn l_factor(&self) -> f64 {
        self.f64("features.l_factor")
    }

    pub fn tile_size(&self) -> usize {
        self.usize("tile.size")
    }

    pub fn tile_stride(&self) -> usize {
        self.usize("tile.stride")
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            architecture: match self.get("train.architecture") {
                "hidden" => Architecture::Hidden(self.usize("train.hidden")),
                _ => Architecture::Linear,
            },
            learning_rate: self.f64("train.learning_rate"),
            epochs: self.usize("train.epochs"),
            batch_size: self.usize("train.batch_size"),
            seed: self.seed_for("train.seed"),
            l2: self.f64("train.l2"),
        }
    }

    pub fn train_augmented(&self) -> bool {
        self.get("train.augment") == "true"
    }

    pub fn eval_scope(&self) -> EvalScope {
        match self.get("evaluate.split") {
            "train" => EvalScope::Train,
            "val" => EvalScope::Val,
            "all" => EvalScope::All,
            _ => EvalScope::Test,
        }
    }

    pub fn palette(&self) -> Palette {
        let c = |k| parse_color(k, self.get(k)).expect("validated");
        Palette([c("render.background"), c("render.crop"), c("render.weed")])
    }

    /// Keys relevant to `stage` (its own section plus the ones it reads),
    /// as `key=value` pairs for the run log.
    pub fn params_for(&self, sections: &[&str]) -> Vec<(String, String)> {
        self.values
            .iter()
            .filter(|(k, _)| k.as_str() == "seed" || sections.iter().any(|s| k.split('.').next() == Some(*s)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
