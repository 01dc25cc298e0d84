//! Stage orchestration: configuration, the per-stage runners, the run log,
//! synthetic data and map rendering.
//!
//! Every stage reads and writes named artifacts under the output directory
//! and appends one line to `run.log` recording its parameters and the
//! SHA-256 digests of what it read and wrote.

mod config;
mod render;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{EvalScope, PipelineConfig};
pub use render::{read_png_rgb, render_map, render_rgb, Palette, Rgb};
pub use synth::{
    generate_synthetic_field, synthetic_panel, to_raw_brightness, CROP, IMPULSE_PROBABILITY, MIN_FIELD_SIZE,
    NOISE_SIGMA, PANEL_REFLECTANCE, PANEL_SIZE, SENSOR_GAIN, SOIL, TEXTURE_AMPLITUDE, WEED,
};

use crate::classifier::{ClassifierError, ClassifierModel, TrainingSet};
use crate::dataset::{
    augment_tile, inference_origins, parse_tile_id, split_tiles, stitch_predictions, tile_image, DatasetError,
    SplitManifest, Tile,
};
use crate::evaluation::{compute_metrics, confusion, EvaluationError};
use crate::indices::{build_feature_stack, FeatureStack, IndexError};
use crate::mosaic::{estimate_pairwise, plan_mosaic, render_mosaic, MosaicError, PairwiseTransform};
use crate::preprocess::{apply_calibration, derive_calibration, median_filter, PreprocessError, Rect};
use crate::raster::{self, parse_capture_filename, FilenameError, LabelMask, MultispectralImage, Product, RasterError};
use crate::registration::{register_band, AffineTransform, RegistrationError};

pub const RUN_LOG: &str = "run.log";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("i/o failure on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("png {0}: {1}")]
    Png(String, String),
    #[error("synthetic field size {size} is below the minimum {min}")]
    SizeTooSmall { size: usize, min: usize },
    #[error("{0}")]
    Ingest(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Filename(#[from] FilenameError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Mosaic(#[from] MosaicError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        use ErrorCategory as C;
        fn raster(e: &RasterError) -> ErrorCategory {
            match e {
                RasterError::IoFailure { .. } => C::Io,
                RasterError::DimensionMismatch(_) => C::DimensionMismatch,
                _ => C::Format,
            }
        }
        match self {
            PipelineError::ConfigInvalid(_) | PipelineError::UnknownStage(_) => C::Config,
            PipelineError::MissingInput(_) => C::MissingInput,
            PipelineError::Io { .. } | PipelineError::Png(..) => C::Io,
            PipelineError::SizeTooSmall { .. } => C::Config,
            PipelineError::Ingest(_) | PipelineError::Filename(_) => C::Format,
            PipelineError::Raster(e) => raster(e),
            PipelineError::Preprocess(PreprocessError::Raster(e)) => raster(e),
            PipelineError::Preprocess(PreprocessError::Parse(_)) => C::Format,
            PipelineError::Preprocess(_) => C::Data,
            PipelineError::Registration(RegistrationError::Raster(e)) => raster(e),
            PipelineError::Registration(RegistrationError::Parse(_)) => C::Format,
            PipelineError::Registration(_) => C::Registration,
            PipelineError::Mosaic(MosaicError::Raster(e)) => raster(e),
            PipelineError::Mosaic(MosaicError::Parse(_)) => C::Format,
            PipelineError::Mosaic(_) => C::Registration,
            PipelineError::Index(IndexError::Raster(e)) => raster(e),
            PipelineError::Index(IndexError::Malformed(_)) => C::Format,
            PipelineError::Index(_) => C::Data,
            PipelineError::Dataset(DatasetError::Raster(e)) => raster(e),
            PipelineError::Dataset(DatasetError::Index(IndexError::Raster(e))) => raster(e),
            PipelineError::Dataset(DatasetError::DimensionMismatch { .. }) => C::DimensionMismatch,
            PipelineError::Dataset(DatasetError::Parse(_)) => C::Format,
            PipelineError::Dataset(_) => C::Data,
            PipelineError::Classifier(ClassifierError::Raster(e)) => raster(e),
            PipelineError::Classifier(ClassifierError::Parse(_)) => C::Format,
            PipelineError::Classifier(ClassifierError::ChannelMismatch { .. }) => C::DimensionMismatch,
            PipelineError::Classifier(_) => C::Training,
            PipelineError::Evaluation(EvaluationError::EmptyMatrix) => C::Data,
            PipelineError::Evaluation(_) => C::DimensionMismatch,
        }
    }
}

/// Failure classes, each with its own process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    MissingInput,
    Io,
    Format,
    DimensionMismatch,
    Registration,
    Data,
    Training,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::MissingInput => 3,
            ErrorCategory::Io => 4,
            ErrorCategory::Format => 5,
            ErrorCategory::DimensionMismatch => 6,
            ErrorCategory::Registration => 7,
            ErrorCategory::Data => 8,
            ErrorCategory::Training => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::MissingInput => "missing-input",
            ErrorCategory::Io => "io",
            ErrorCategory::Format => "format",
            ErrorCategory::DimensionMismatch => "dimension-mismatch",
            ErrorCategory::Registration => "registration",
            ErrorCategory::Data => "data",
            ErrorCategory::Training => "training",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Denoise,
    Calibrate,
    Register,
    Mosaic,
    Features,
    Tile,
    Split,
    Augment,
    Train,
    Predict,
    Evaluate,
    Render,
    Synth,
}

impl Stage {
    pub const ALL: [Stage; 14] = [
        Stage::Ingest,
        Stage::Denoise,
        Stage::Calibrate,
        Stage::Register,
        Stage::Mosaic,
        Stage::Features,
        Stage::Tile,
        Stage::Split,
        Stage::Augment,
        Stage::Train,
        Stage::Predict,
        Stage::Evaluate,
        Stage::Render,
        Stage::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Denoise => "denoise",
            Stage::Calibrate => "calibrate",
            Stage::Register => "register",
            Stage::Mosaic => "mosaic",
            Stage::Features => "features",
            Stage::Tile => "tile",
            Stage::Split => "split",
            Stage::Augment => "augment",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Render => "render",
            Stage::Synth => "synth",
        }
    }

    /// Config sections whose keys the stage reads.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Register => &["register", "detector", "ransac"],
            Stage::Mosaic => &["mosaic", "register", "detector", "ransac"],
            Stage::Split => &["split", "tile"],
            Stage::Augment => &["augment", "split", "tile"],
            Stage::Train => &["train", "split", "augment", "tile"],
            Stage::Predict => &["predict", "tile", "train"],
            Stage::Evaluate => &["evaluate", "split", "tile"],
            s => std::slice::from_ref(match s {
                Stage::Ingest => &"ingest",
                Stage::Denoise => &"denoise",
                Stage::Calibrate => &"calibrate",
                Stage::Features => &"features",
                Stage::Tile => &"tile",
                Stage::Render => &"render",
                _ => &"synth",
            }),
        }
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_ms: u128,
    /// Short human-readable result line.
    pub summary: String,
}

#[derive(Default)]
struct Io {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    summary: String,
}

impl Io {
    fn input(&mut self, path: PathBuf) -> Result<PathBuf, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingInput(path));
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn output(&mut self, path: PathBuf) -> Result<PathBuf, PipelineError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        self.outputs.push(path.clone());
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

fn read_id_list(path: &Path) -> Result<Vec<String>, PipelineError> {
    Ok(read_text(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Runs one stage inside a worker pool sized by `jobs` (0 = all cores)
/// and appends the outcome to the run log.
pub fn run_stage(stage: Stage, config: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let out_dir = config.out_dir();
    fs::create_dir_all(&out_dir).map_err(|e| PipelineError::io(&out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs())
        .build()
        .map_err(|e| PipelineError::ConfigInvalid(format!("cannot start {} workers: {e}", config.jobs())))?;
    let start = Instant::now();
    let result = pool.install(|| dispatch(stage, config));
    let duration_ms = start.elapsed().as_millis();
    let report = result.map(|io| StageReport {
        stage,
        inputs: io.inputs,
        outputs: io.outputs,
        duration_ms,
        summary: io.summary,
    });
    append_run_log(stage, config, &report, duration_ms)?;
    report
}

/// Runs stages in order, stopping at the first failure.
pub fn run_stages(stages: &[Stage], config: &PipelineConfig) -> Result<Vec<StageReport>, PipelineError> {
    stages.iter().map(|&s| run_stage(s, config)).collect()
}

fn append_run_log(
    stage: Stage,
    config: &PipelineConfig,
    report: &Result<StageReport, PipelineError>,
    duration_ms: u128,
) -> Result<(), PipelineError> {
    let out_dir = config.out_dir();
    let rel = |p: &Path| p.strip_prefix(&out_dir).unwrap_or(p).display().to_string();
    let mut line = format!("stage={stage} jobs={}", config.jobs());
    match report {
        Ok(r) => {
            line.push_str(" status=ok");
            for p in &r.inputs {
                line.push_str(&format!(" in:{}={}", rel(p), sha256_file(p)?));
            }
            for p in &r.outputs {
                line.push_str(&format!(" out:{}={}", rel(p), sha256_file(p)?));
            }
        }
        Err(e) => line.push_str(&format!(" status=error category={}", e.category())),
    }
    for (k, v) in config.params_for(stage.sections()) {
        line.push_str(&format!(" param:{k}={v}"));
    }
    line.push_str(&format!(" duration_ms={duration_ms}\n"));
    let path = out_dir.join(RUN_LOG);
    let mut f =
        fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| PipelineError::io(&path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| PipelineError::io(&path, e))
}

fn dispatch(stage: Stage, cfg: &PipelineConfig) -> Result<Io, PipelineError> {
    let mut io = Io::default();
    match stage {
        Stage::Synth => synth_stage(cfg, &mut io)?,
        Stage::Ingest => ingest_stage(cfg, &mut io)?,
        Stage::Denoise => denoise_stage(cfg, &mut io)?,
        Stage::Register => register_stage(cfg, &mut io)?,
        Stage::Mosaic => mosaic_stage(cfg, &mut io)?,
        Stage::Calibrate => calibrate_stage(cfg, &mut io)?,
        Stage::Features => features_stage(cfg, &mut io)?,
        Stage::Tile => tile_stage(cfg, &mut io)?,
        Stage::Split => split_stage(cfg, &mut io)?,
        Stage::Augment => augment_stage(cfg, &mut io)?,
        Stage::Train => train_stage(cfg, &mut io)?,
        Stage::Predict => predict_stage(cfg, &mut io)?,
        Stage::Evaluate => evaluate_stage(cfg, &mut io)?,
        Stage::Render => render_stage(cfg, &mut io)?,
    }
    Ok(io)
}

fn synth_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let seed = cfg.synth_seed();
    let (reflectance, labels) = generate_synthetic_field(seed, cfg.synth_size())?;
    let field = to_raw_brightness(&reflectance)?;
    let panel = to_raw_brightness(&synthetic_panel(seed)?)?;
    raster::write_raster(&field, &io.output(cfg.artifact("synth.field"))?)?;
    raster::write_labels(&labels, &io.output(cfg.artifact("synth.labels"))?)?;
    raster::write_raster(&panel, &io.output(cfg.artifact("synth.panel"))?)?;
    let h = labels.histogram();
    io.summary = format!(
        "synthetic field {0}x{0}, seed {seed}: background={1} crop={2} weed={3}",
        cfg.synth_size(),
        h[0],
        h[1],
        h[2]
    );
    Ok(())
}

/// Groups inputs named `YYYYMMDD_AREA_HHMM_TYPE.msr` by capture and merges
/// the RGB, NIR and RedEdge products of each capture into one image; other
/// names pass through as standalone captures.
fn ingest_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let inputs = cfg.ingest_inputs();
    if inputs.is_empty() {
        return Err(PipelineError::ConfigInvalid("ingest.inputs lists no files".into()));
    }
    let mut groups: BTreeMap<String, Vec<(Option<Product>, MultispectralImage)>> = BTreeMap::new();
    let mut metas = BTreeMap::new();
    for path in inputs {
        let path = io.input(path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        let image = raster::read_raster(&path)?;
        match parse_capture_filename(&name) {
            Ok(meta) => {
                let key = format!("{}_{}_{}", meta.date.format("%Y%m%d"), meta.area_id, meta.time.format("%H%M"));
                groups.entry(key.clone()).or_default().push((Some(meta.product), image));
                metas.entry(key).or_insert(meta);
            }
            Err(FilenameError::PatternMismatch(_)) => {
                let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or(name);
                log::warn!("{stem}: name does not follow the capture convention; ingesting as-is");
                groups.entry(stem).or_default().push((None, image));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let dir = cfg.artifact("ingest.output_dir");
    let mut index = String::new();
    for (key, parts) in groups {
        let mut bands = Vec::new();
        for (product, image) in parts {
            if let Some(p) = product {
                let expected: &[raster::BandKind] = match p {
                    Product::Rgb => &[raster::BandKind::Red, raster::BandKind::Green, raster::BandKind::Blue],
                    Product::Nir => &[raster::BandKind::Nir],
                    Product::RedEdge => &[raster::BandKind::RedEdge],
                };
                if let Some(b) = image.kinds().into_iter().find(|k| !expected.contains(k)) {
                    return Err(PipelineError::Ingest(format!("{key}: {} product carries band {b}", p.tag())));
                }
            }
            bands.extend(image.into_bands());
        }
        let mut merged = MultispectralImage::new(bands)?;
        merged.capture_meta = metas.get(&key).cloned();
        raster::write_raster(&merged, &io.output(dir.join(format!("{key}.msr")))?)?;
        let kinds: Vec<&str> = merged.kinds().iter().map(|k| k.name()).collect();
        index.push_str(&format!("{key} {}x{} {}\n", merged.width(), merged.height(), kinds.join(",")));
    }
    write_text(&io.output(dir.join("index.txt"))?, &index)?;
    io.summary = format!("ingested {} capture(s)", index.lines().count());
    Ok(())
}

fn denoise_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let image = raster::read_raster(&io.input(cfg.artifact("denoise.input"))?)?;
    let radius = cfg.median_radius();
    let out = image.try_map_bands(|b| median_filter(b, radius))?;
    raster::write_raster(&out, &io.output(cfg.artifact("denoise.output"))?)?;
    io.summary = format!("median filter radius {radius} on {} band(s)", out.bands().len());
    Ok(())
}

/// Aligns every band to the reference band. A band that fails to match
/// the reference directly is retried against bands already brought into
/// the reference frame (blue, say, matches red far better than NIR).
fn register_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let image = raster::read_raster(&io.input(cfg.artifact("register.input"))?)?;
    let reference_kind = cfg.band("register.reference");
    let reference = image
        .band(reference_kind)
        .ok_or_else(|| PipelineError::ConfigInvalid(format!("input has no {reference_kind} band")))?;
    let reg = cfg.registration();

    // kind -> (transform into the reference frame, aligned band, anchor)
    let mut done: BTreeMap<raster::BandKind, (AffineTransform, raster::Band, raster::BandKind)> = BTreeMap::new();
    done.insert(reference_kind, (AffineTransform::IDENTITY, reference.clone(), reference_kind));
    let mut anchors = vec![reference_kind];
    let mut pending: Vec<&raster::Band> = image.bands().iter().filter(|b| b.kind() != reference_kind).collect();
    let mut worst_ncc = 1.0f64;
    while !pending.is_empty() {
        let before = pending.len();
        let mut still = Vec::new();
        let mut first_error = None;
        for band in pending {
            let mut found = None;
            for &anchor in &anchors {
                match register_band(&done[&anchor].1, band, &reg) {
                    Ok(a) => {
                        found = Some((a, anchor));
                        break;
                    }
                    Err(e) => {
                        first_error.get_or_insert(e);
                    }
                }
            }
            match found {
                Some((a, anchor)) => {
                    worst_ncc = worst_ncc.min(a.score.ncc);
                    log::info!("{} aligned via {anchor} ({} inliers)", band.kind(), a.inliers);
                    done.insert(band.kind(), (a.transform, a.aligned.with_kind(band.kind()), anchor));
                    anchors.push(band.kind());
                }
                None => still.push(band),
            }
        }
        if still.len() == before {
            return Err(first_error.expect("a failed band records its error").into());
        }
        pending = still;
    }

    let mut text = String::new();
    let mut bands = Vec::new();
    let mut via = Vec::new();
    for kind in image.kinds() {
        let (t, band, anchor) = done.remove(&kind).expect("every band aligned");
        text.push_str(&format!("{} {}", kind.name(), t.to_text()));
        if anchor != reference_kind {
            via.push(format!("{kind} via {anchor}"));
        }
        bands.push(band);
    }
    let mut out = MultispectralImage::new(bands)?;
    out.capture_meta = image.capture_meta.clone();
    raster::write_raster(&out, &io.output(cfg.artifact("register.output"))?)?;
    write_text(&io.output(cfg.artifact("register.transforms"))?, &text)?;
    io.summary = format!("registered {} band(s) to {reference_kind}, lowest NCC {worst_ncc:.3}", out.bands().len() - 1);
    if !via.is_empty() {
        io.summary.push_str(&format!(" ({})", via.join(", ")));
    }
    Ok(())
}

fn mosaic_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let dir = cfg.artifact("mosaic.input_dir");
    if !dir.is_dir() {
        return Err(PipelineError::MissingInput(dir));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| PipelineError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "msr"))
        .collect();
    paths.sort();
    let mut captures = Vec::with_capacity(paths.len());
    for p in paths {
        captures.push(raster::read_raster(&io.input(p)?)?);
    }
    if captures.is_empty() {
        return Err(PipelineError::MissingInput(dir.join("*.msr")));
    }
    let kind = cfg.band("mosaic.band");
    let reg = cfg.registration();
    let mut pairwise = Vec::new();
    for k in 1..captures.len() {
        let band = |i: usize| captures[i].band(kind).ok_or(MosaicError::MissingBand { capture: i, band: kind });
        let transform = estimate_pairwise(band(k - 1)?, band(k)?, &reg)?;
        pairwise.push(PairwiseTransform { from: k, to: k - 1, transform });
    }
    let sizes: Vec<(usize, usize)> = captures.iter().map(|c| (c.width(), c.height())).collect();
    let plan = plan_mosaic(&sizes, &pairwise)?;
    let mosaic = render_mosaic(&captures, &plan)?;
    write_text(&io.output(cfg.artifact("mosaic.plan"))?, &plan.to_text())?;
    raster::write_raster(&mosaic, &io.output(cfg.artifact("mosaic.output"))?)?;
    io.summary =
        format!("mosaic of {} capture(s), canvas {}x{}", captures.len(), plan.canvas.width, plan.canvas.height);
    Ok(())
}

fn calibrate_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let image = raster::read_raster(&io.input(cfg.artifact("calibrate.input"))?)?;
    let panel = raster::read_raster(&io.input(cfg.artifact("calibrate.panel"))?)?;
    let region = cfg.panel_region().unwrap_or(Rect::new(0, 0, panel.width(), panel.height()));
    let targets = panel.kinds().into_iter().map(|k| (k, cfg.r_target(k))).collect();
    let record = derive_calibration(&panel, region, &targets)?;
    let calibrated = apply_calibration(&image, &record)?;
    record.save(&io.output(cfg.artifact("calibrate.record"))?)?;
    raster::write_raster(&calibrated, &io.output(cfg.artifact("calibrate.output"))?)?;
    let factors: Vec<String> = record.iter().map(|(k, c)| format!("{k}={:.6}", c.c_calibration)).collect();
    io.summary = format!("calibration factors {}", factors.join(" "));
    Ok(())
}

fn features_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let image = raster::read_raster(&io.input(cfg.artifact("features.input"))?)?;
    let stack = build_feature_stack(&image, cfg.l_factor())?;
    stack.write(&io.output(cfg.artifact("features.output"))?)?;
    let valid = stack.valid().iter().filter(|&&v| v).count();
    io.summary = format!("10-channel stack {}x{}, {valid} valid pixels", stack.width(), stack.height());
    Ok(())
}

fn tile_index_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.artifact("tile.dir").join("index.txt")
}

/// Dataset tiles are cut without overlap so that no pixel can land in two
/// splits; `tile.stride` governs the overlapping inference sweep.
fn tile_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let stack = FeatureStack::read(&io.input(cfg.artifact("tile.input"))?)?;
    let labels = raster::read_labels(&io.input(cfg.artifact("tile.labels"))?)?;
    let size = cfg.tile_size();
    let tiles = tile_image(&stack, &labels, cfg.get("tile.source_id"), size, size)?;
    let dir = cfg.artifact("tile.dir");
    let mut index = String::new();
    for t in &tiles {
        let id = t.id();
        io.output(dir.join(format!("{id}.msr")))?;
        io.output(dir.join(format!("{id}.msl")))?;
        t.save(&dir)?;
        index.push_str(&id);
        index.push('\n');
    }
    write_text(&io.output(tile_index_path(cfg))?, &index)?;
    io.summary = format!("{} tile(s) of {size}x{size}", tiles.len());
    Ok(())
}

fn split_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let ids = read_id_list(&io.input(tile_index_path(cfg))?)?;
    let manifest = split_tiles(&ids, cfg.split_seed())?;
    manifest.save(&io.output(cfg.artifact("split.manifest"))?)?;
    io.summary = format!("train={} val={} test={}", manifest.train.len(), manifest.val.len(), manifest.test.len());
    Ok(())
}

fn augment_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let manifest = SplitManifest::load(&io.input(cfg.artifact("split.manifest"))?)?;
    let dir = cfg.artifact("tile.dir");
    let mut index = String::new();
    for id in &manifest.train {
        io.input(dir.join(format!("{id}.msr")))?;
        io.input(dir.join(format!("{id}.msl")))?;
        let tile = Tile::load(&dir, id)?;
        for v in augment_tile(&tile)? {
            let vid = v.id();
            io.output(dir.join(format!("{vid}.msr")))?;
            io.output(dir.join(format!("{vid}.msl")))?;
            v.save(&dir)?;
            index.push_str(&vid);
            index.push('\n');
        }
    }
    write_text(&io.output(cfg.artifact("augment.index"))?, &index)?;
    io.summary = format!("{} augmented tile(s) from {} training tile(s)", index.lines().count(), manifest.train.len());
    Ok(())
}

fn train_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let manifest = SplitManifest::load(&io.input(cfg.artifact("split.manifest"))?)?;
    let mut ids = manifest.train.clone();
    if cfg.train_augmented() {
        ids.extend(read_id_list(&io.input(cfg.artifact("augment.index"))?)?);
    }
    let dir = cfg.artifact("tile.dir");
    let mut data = TrainingSet::default();
    for id in &ids {
        io.input(dir.join(format!("{id}.msr")))?;
        io.input(dir.join(format!("{id}.msl")))?;
        let tile = Tile::load(&dir, id)?;
        data.extend(&tile.features, &tile.labels);
    }
    let outcome = crate::classifier::train(&data, &cfg.train())?;
    outcome.model.save(&io.output(cfg.artifact("train.model"))?)?;
    let loss: String = outcome.loss_history.iter().enumerate().map(|(e, l)| format!("{e} {l}\n")).collect();
    write_text(&io.output(cfg.artifact("train.loss"))?, &loss)?;
    io.summary = format!(
        "trained on {} pixels from {} tile(s), loss {:.4} -> {:.4}",
        data.len(),
        ids.len(),
        outcome.loss_history[0],
        outcome.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn predict_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let stack = FeatureStack::read(&io.input(cfg.artifact("predict.input"))?)?;
    let model = ClassifierModel::load(&io.input(cfg.artifact("train.model"))?)?;
    let size = cfg.tile_size().min(stack.width()).min(stack.height());
    let stride = cfg.tile_stride().min(size);
    let origins = inference_origins(stack.width(), stack.height(), size, stride)?;
    let patches = origins
        .iter()
        .map(|&(x, y)| model.predict_patch(&stack.crop(x, y, size, size), (x, y)))
        .collect::<Result<Vec<_>, _>>()?;
    let mask = stitch_predictions(&patches, stack.width(), stack.height())?;
    raster::write_labels(&mask, &io.output(cfg.artifact("predict.output"))?)?;
    let h = mask.histogram();
    io.summary = format!("{} window(s); predicted background={} crop={} weed={}", origins.len(), h[0], h[1], h[2]);
    Ok(())
}

/// Pixels to score: valid features inside the tiles of the chosen split.
fn evaluation_mask(cfg: &PipelineConfig, io: &mut Io, width: usize, height: usize) -> Result<Vec<bool>, PipelineError> {
    let stack = FeatureStack::read(&io.input(cfg.artifact("evaluate.features"))?)?;
    if stack.width() != width || stack.height() != height {
        return Err(
            EvaluationError::DimensionMismatch { gt: (width, height), pred: (stack.width(), stack.height()) }.into()
        );
    }
    let mut mask = stack.valid().to_vec();
    let ids = match cfg.eval_scope() {
        EvalScope::All => return Ok(mask),
        scope => {
            let m = SplitManifest::load(&io.input(cfg.artifact("split.manifest"))?)?;
            match scope {
                EvalScope::Train => m.train,
                EvalScope::Val => m.val,
                _ => m.test,
            }
        }
    };
    let size = cfg.tile_size();
    let mut inside = vec![false; width * height];
    for id in ids {
        let (_, (x0, y0), _) = parse_tile_id(&id)?;
        for y in y0..(y0 + size).min(height) {
            for x in x0..(x0 + size).min(width) {
                inside[y * width + x] = true;
            }
        }
    }
    for (m, i) in mask.iter_mut().zip(inside) {
        *m &= i;
    }
    Ok(mask)
}

fn evaluate_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let pred = raster::read_labels(&io.input(cfg.artifact("evaluate.prediction"))?)?;
    let gt = raster::read_labels(&io.input(cfg.artifact("evaluate.labels"))?)?;
    if (gt.width(), gt.height()) != (pred.width(), pred.height()) {
        return Err(EvaluationError::DimensionMismatch {
            gt: (gt.width(), gt.height()),
            pred: (pred.width(), pred.height()),
        }
        .into());
    }
    let mask = evaluation_mask(cfg, io, gt.width(), gt.height())?;
    let cm = confusion(&gt, &pred, Some(&mask))?;
    let report = compute_metrics(&cm)?;
    let text = format!("{report}\n{}\n", report.to_record());
    write_text(&io.output(cfg.artifact("evaluate.output"))?, &text)?;
    io.summary = report.to_record();
    Ok(())
}

fn render_stage(cfg: &PipelineConfig, io: &mut Io) -> Result<(), PipelineError> {
    let mask: LabelMask = raster::read_labels(&io.input(cfg.artifact("render.input"))?)?;
    render_map(&mask, &io.output(cfg.artifact("render.output"))?, &cfg.palette())?;
    io.summary = format!("rendered {}x{} map", mask.width(), mask.height());
    Ok(())
}

/// Reads the metrics record written by the evaluate stage.
pub fn read_metrics_record(path: &Path) -> Result<String, PipelineError> {
    read_text(path)?
        .lines()
        .rev()
        .find(|l| l.starts_with("accuracy="))
        .map(String::from)
        .ok_or_else(|| PipelineError::ConfigInvalid(format!("{} holds no metrics record", path.display())))
}

/// Digest of every file under `dir` except the run log, keyed by relative
/// path; used to compare two runs artifact by artifact.
pub fn artifact_digests(dir: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    let mut seen = BTreeSet::new();
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| PipelineError::io(&d, e))? {
            let path = entry.map_err(|e| PipelineError::io(&d, e))?.path();
            if path.is_dir() {
                if seen.insert(path.clone()) {
                    stack.push(path);
                }
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap_or(&path).display().to_string();
            if rel != RUN_LOG {
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_in(dir: &Path, extra: &str) -> PipelineConfig {
        let mut cfg = PipelineConfig::parse(&format!("synth.size=512\nseed=7\n{extra}"), dir).unwrap();
        cfg.set_out_dir(dir.join("out"));
        cfg
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("fly".parse::<Stage>().unwrap_err().category(), ErrorCategory::Config);
    }

    #[test]
    fn synth_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let a = cfg_in(dir.path(), "");
        run_stage(Stage::Synth, &a).unwrap();
        let first = artifact_digests(&a.out_dir()).unwrap();
        run_stage(Stage::Synth, &a).unwrap();
        assert_eq!(artifact_digests(&a.out_dir()).unwrap(), first);
        let log = fs::read_to_string(a.out_dir().join(RUN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.contains("out:field.msr="));
    }

    #[test]
    fn missing_input_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage(Stage::Features, &cfg_in(dir.path(), "")).unwrap_err();
        assert_eq!(err.category(), ErrorCategory::MissingInput);
        let log = fs::read_to_string(dir.path().join("out").join(RUN_LOG)).unwrap();
        assert!(log.contains("status=error category=missing-input"));
    }

    #[test]
    fn evaluate_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_in(dir.path(), "evaluate.split=all");
        let out = cfg.out_dir();
        fs::create_dir_all(&out).unwrap();
        raster::write_labels(&LabelMask::filled(4, 4, raster::Class::Crop).unwrap(), &out.join("labels.msl")).unwrap();
        raster::write_labels(&LabelMask::filled(5, 4, raster::Class::Crop).unwrap(), &out.join("prediction.msl"))
            .unwrap();
        let err = run_stage(Stage::Evaluate, &cfg).unwrap_err();
        assert_eq!(err.category(), ErrorCategory::DimensionMismatch);
        assert_eq!(err.category().exit_code(), 6);
    }

    #[test]
    fn ingest_merges_products_of_one_capture() {
        let dir = tempfile::tempdir().unwrap();
        let band = |k| raster::Band::constant(k, 8, 8, 0.25).unwrap();
        use raster::BandKind::*;
        let rgb = MultispectralImage::new(vec![band(Red), band(Green), band(Blue)]).unwrap();
        let nir = MultispectralImage::new(vec![band(Nir)]).unwrap();
        let re = MultispectralImage::new(vec![band(RedEdge)]).unwrap();
        raster::write_raster(&rgb, &dir.path().join("20240423_E2_1230_RGB.msr")).unwrap();
        raster::write_raster(&nir, &dir.path().join("20240423_E2_1230_NIR.msr")).unwrap();
        raster::write_raster(&re, &dir.path().join("20240423_E2_1230_RedEdge.msr")).unwrap();
        let cfg = cfg_in(
            dir.path(),
            "ingest.inputs=20240423_E2_1230_RGB.msr, 20240423_E2_1230_NIR.msr,20240423_E2_1230_RedEdge.msr",
        );
        run_stage(Stage::Ingest, &cfg).unwrap();
        let merged = raster::read_raster(&cfg.out_dir().join("captures/20240423_E2_1230.msr")).unwrap();
        assert_eq!(merged.bands().len(), 5);

        raster::write_raster(&rgb, &dir.path().join("20240423_E2_1230_NIR.msr")).unwrap();
        let err = run_stage(Stage::Ingest, &cfg).unwrap_err();
        assert_eq!(err.category(), ErrorCategory::Format);
    }

    #[test]
    fn denoise_and_render_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_in(dir.path(), "render.input=labels.msl\nrender.output=labels.png");
        run_stages(&[Stage::Synth, Stage::Denoise, Stage::Render], &cfg).unwrap();
        let (w, h, px) = read_png_rgb(&cfg.out_dir().join("labels.png")).unwrap();
        assert_eq!((w, h), (512, 512));
        let palette = Palette::default();
        assert!(px.iter().all(|p| palette.0.contains(p)));
        let raw = raster::read_raster(&cfg.out_dir().join("field.msr")).unwrap();
        let den = raster::read_raster(&cfg.out_dir().join("denoised.msr")).unwrap();
        assert_eq!(raw.kinds(), den.kinds());
    }
}
