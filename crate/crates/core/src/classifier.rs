//! Pixelwise three-class classifier over the ten-channel feature stack:
//! softmax regression or a one-hidden-layer ReLU network, trained by seeded
//! mini-batch SGD on standardized features.
//!
//! Gradients are accumulated over fixed 64-pixel chunks and summed in chunk
//! order, so trained weights do not depend on the worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{ProbabilityPatch, Tile};
use crate::indices::{FeatureStack, CHANNEL_COUNT};
use crate::raster::{Class, LabelMask, RasterError, CLASS_COUNT};

const CHUNK: usize = 64;
/// Channels whose training spread is below this are left unscaled.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("class {0} has no valid labelled pixel in the training data")]
    MissingClass(&'static str),
    #[error("training loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("model expects {expected} channels, stack has {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Parse(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    Hidden(usize),
}

/// Fully connected layer; `weights` is `outputs` rows of `inputs` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Dense { inputs, outputs, weights, bias: vec![0.0; outputs] }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Per-channel standardization learned from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(channels: usize) -> Self {
        FeatureStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    fn of(samples: &[[f32; CHANNEL_COUNT]]) -> Self {
        let n = samples.len() as f64;
        let mut mean = vec![0.0; CHANNEL_COUNT];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; CHANNEL_COUNT];
        for s in samples {
            for ((acc, &v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v as f64 - m).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s < MIN_STD { 1.0 } else { s }).collect();
        FeatureStats { mean, std }
    }

    pub fn standardize(&self, x: &[f32], out: &mut [f64]) {
        for (((o, &v), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.std) {
            *o = (v as f64 - m) / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub architecture: Architecture,
    pub stats: FeatureStats,
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::Linear,
            learning_rate: 0.5,
            epochs: 5,
            batch_size: 256,
            seed: 0,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be non-negative");
        }
        if self.architecture == Architecture::Hidden(0) {
            return bad("hidden width must be at least 1");
        }
        Ok(())
    }
}

/// Valid pixels and labels gathered from a set of tiles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub features: Vec<[f32; CHANNEL_COUNT]>,
    pub labels: Vec<u8>,
}

impl TrainingSet {
    pub fn from_tiles(tiles: &[Tile]) -> Self {
        let mut set = TrainingSet::default();
        for t in tiles {
            set.extend(&t.features, &t.labels);
        }
        set
    }

    pub fn extend(&mut self, stack: &FeatureStack, labels: &LabelMask) {
        for (i, (&ok, &c)) in stack.valid().iter().zip(labels.classes()).enumerate() {
            if ok {
                self.features.push(stack.pixel(i));
                self.labels.push(c);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    /// Mean training loss before the first epoch, then after each epoch.
    pub loss_history: Vec<f64>,
}

/// Scratch space for one forward/backward pass.
struct Workspace {
    x: Vec<f64>,
    hidden: Vec<f64>,
}

impl ClassifierModel {
    pub fn zeros(architecture: Architecture, stats: FeatureStats) -> Self {
        let inputs = stats.mean.len();
        let layers = match architecture {
            Architecture::Linear => vec![Dense::zeros(inputs, CLASS_COUNT)],
            Architecture::Hidden(h) => vec![Dense::zeros(inputs, h), Dense::zeros(h, CLASS_COUNT)],
        };
        ClassifierModel { architecture, stats, layers }
    }

    pub fn initialized(architecture: Architecture, stats: FeatureStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(architecture, stats);
        for l in &mut m.layers {
            *l = Dense::glorot(l.inputs, l.outputs, &mut rng);
        }
        m
    }

    pub fn input_count(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().expect("parameter count"));
        }
    }

    fn workspace(&self) -> Workspace {
        let hidden = if self.layers.len() == 2 { self.layers[0].outputs } else { 0 };
        Workspace { x: vec![0.0; self.input_count()], hidden: vec![0.0; hidden] }
    }

    /// Logits for an already standardized input, writing hidden
    /// pre-activations into `ws_hidden`.
    fn forward_std(&self, x: &[f64], ws_hidden: &mut [f64], logits: &mut [f64]) {
        match self.layers.as_slice() {
            [out] => out.forward(x, logits),
            [first, out] => {
                first.forward(x, ws_hidden);
                let act: Vec<f64> = ws_hidden.iter().map(|&z| z.max(0.0)).collect();
                out.forward(&act, logits);
            }
            _ => unreachable!("one or two layers"),
        }
    }

    pub fn logits(&self, x: &[f32]) -> [f64; CLASS_COUNT] {
        let mut ws = self.workspace();
        self.stats.standardize(x, &mut ws.x);
        let mut logits = [0.0; CLASS_COUNT];
        self.forward_std(&ws.x, &mut ws.hidden, &mut logits);
        logits
    }

    pub fn probabilities(&self, x: &[f32]) -> [f64; CLASS_COUNT] {
        softmax(&self.logits(x))
    }

    /// Cross-entropy of one standardized sample; adds `scale`·∂loss/∂θ to
    /// `grad` when given.
    fn sample_loss(&self, x: &[f64], label: usize, ws: &mut Workspace, grad: Option<(&mut [f64], f64)>) -> f64 {
        let mut logits = [0.0; CLASS_COUNT];
        self.forward_std(x, &mut ws.hidden, &mut logits);
        let p = softmax(&logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let loss = lse - logits[label];

        if let Some((g, scale)) = grad {
            let mut d = p;
            d[label] -= 1.0;
            d.iter_mut().for_each(|v| *v *= scale);
            match self.layers.as_slice() {
                [out] => accumulate_dense(g, out, x, &d),
                [first, out] => {
                    let act: Vec<f64> = ws.hidden.iter().map(|&z| z.max(0.0)).collect();
                    let (g1, g2) = g.split_at_mut(first.param_count());
                    accumulate_dense(g2, out, &act, &d);
                    let mut dz = vec![0.0; first.outputs];
                    for (j, dzj) in dz.iter_mut().enumerate() {
                        if ws.hidden[j] > 0.0 {
                            *dzj = (0..CLASS_COUNT).map(|k| out.weights[k * out.inputs + j] * d[k]).sum();
                        }
                    }
                    accumulate_dense(g1, first, x, &dz);
                }
                _ => unreachable!(),
            }
        }
        loss
    }

    /// Mean loss (and gradient) over standardized samples `xs`, using a
    /// fixed chunked reduction order.
    fn batch_loss_grad(&self, xs: &[f64], labels: &[u8], want_grad: bool) -> (f64, Vec<f64>) {
        let d = self.input_count();
        let n = labels.len();
        let scale = 1.0 / n as f64;
        let parts: Vec<(f64, Vec<f64>)> = labels
            .par_chunks(CHUNK)
            .zip(xs.par_chunks(CHUNK * d))
            .map(|(ls, xc)| {
                let mut ws = self.workspace();
                let mut g = if want_grad { vec![0.0; self.param_count()] } else { Vec::new() };
                let mut loss = 0.0;
                for (k, &l) in ls.iter().enumerate() {
                    let x = &xc[k * d..(k + 1) * d];
                    let gr = if want_grad { Some((g.as_mut_slice(), scale)) } else { None };
                    loss += self.sample_loss(x, l as usize, &mut ws, gr);
                }
                (loss, g)
            })
            .collect();
        let mut total = 0.0;
        let mut grad = if want_grad { vec![0.0; self.param_count()] } else { Vec::new() };
        for (l, g) in parts {
            total += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (total * scale, grad)
    }

    /// Analytic gradient of the mean cross-entropy over a raw batch, in
    /// [`params`](Self::params) order.
    pub fn gradient(&self, batch: &[([f32; CHANNEL_COUNT], u8)]) -> Vec<f64> {
        let (xs, labels) = self.standardize_batch(batch);
        self.batch_loss_grad(&xs, &labels, true).1
    }

    pub fn loss(&self, batch: &[([f32; CHANNEL_COUNT], u8)]) -> f64 {
        let (xs, labels) = self.standardize_batch(batch);
        self.batch_loss_grad(&xs, &labels, false).0
    }

    fn standardize_batch(&self, batch: &[([f32; CHANNEL_COUNT], u8)]) -> (Vec<f64>, Vec<u8>) {
        let d = self.input_count();
        let mut xs = vec![0.0; batch.len() * d];
        for ((x, _), out) in batch.iter().zip(xs.chunks_exact_mut(d)) {
            self.stats.standardize(x, out);
        }
        (xs, batch.iter().map(|b| b.1).collect())
    }

    fn l2_penalty(&self) -> f64 {
        self.layers.iter().flat_map(|l| &l.weights).map(|w| w * w).sum::<f64>() * 0.5
    }

    fn check_channels(&self, stack: &FeatureStack) -> Result<(), ClassifierError> {
        if stack.channels().len() != self.input_count() {
            return Err(ClassifierError::ChannelMismatch {
                expected: self.input_count(),
                found: stack.channels().len(),
            });
        }
        Ok(())
    }

    /// Per-pixel softmax probabilities and argmax labels. Invalid pixels
    /// are background with uniform probabilities.
    pub fn predict(&self, stack: &FeatureStack) -> Result<(LabelMask, [Vec<f32>; CLASS_COUNT]), ClassifierError> {
        self.check_channels(stack)?;
        let (w, h) = (stack.width(), stack.height());
        let rows: Vec<(Vec<u8>, Vec<[f32; CLASS_COUNT]>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut classes = Vec::with_capacity(w);
                let mut probs = Vec::with_capacity(w);
                for x in 0..w {
                    let i = y * w + x;
                    if !stack.valid()[i] {
                        classes.push(Class::Background as u8);
                        probs.push([1.0 / CLASS_COUNT as f32; CLASS_COUNT]);
                        continue;
                    }
                    let p = self.probabilities(&stack.pixel(i));
                    classes.push(argmax(&p) as u8);
                    probs.push(p.map(|v| v as f32));
                }
                (classes, probs)
            })
            .collect();
        let mut classes = Vec::with_capacity(w * h);
        let mut planes: [Vec<f32>; CLASS_COUNT] = std::array::from_fn(|_| Vec::with_capacity(w * h));
        for (c, p) in rows {
            classes.extend(c);
            for px in p {
                for (plane, v) in planes.iter_mut().zip(px) {
                    plane.push(v);
                }
            }
        }
        Ok((LabelMask::new(w, h, classes)?, planes))
    }

    pub fn predict_patch(
        &self,
        stack: &FeatureStack,
        origin: (usize, usize),
    ) -> Result<ProbabilityPatch, ClassifierError> {
        let (_, probabilities) = self.predict(stack)?;
        Ok(ProbabilityPatch { origin, width: stack.width(), height: stack.height(), probabilities })
    }

    pub fn to_text(&self) -> String {
        let (arch, hidden) = match self.architecture {
            Architecture::Linear => ("linear", 0),
            Architecture::Hidden(h) => ("hidden", h),
        };
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::from("agripipe-classifier 1\n");
        let _ = writeln!(s, "architecture {arch}");
        let _ = writeln!(s, "hidden {hidden}");
        let _ = writeln!(s, "class_count {CLASS_COUNT}");
        let _ = writeln!(s, "inputs {}", self.input_count());
        let _ = writeln!(s, "mean {}", join(&self.stats.mean));
        let _ = writeln!(s, "std {}", join(&self.stats.std));
        for l in &self.layers {
            let _ = writeln!(s, "layer {} {}", l.outputs, l.inputs);
            for row in l.weights.chunks_exact(l.inputs) {
                let _ = writeln!(s, "{}", join(row));
            }
            let _ = writeln!(s, "{}", join(&l.bias));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ClassifierError> {
        let err = |m: String| ClassifierError::Parse(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| err(format!("missing {what}")));
        if next("header")?.trim() != "agripipe-classifier 1" {
            return Err(err("unknown header".into()));
        }
        fn field<'a>(line: &'a str, key: &str) -> Result<&'a str, ClassifierError> {
            line.trim()
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| ClassifierError::Parse(format!("expected {key}, found {line:?}")))
        }
        fn nums(s: &str) -> Result<Vec<f64>, ClassifierError> {
            s.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| ClassifierError::Parse(format!("bad number {v:?}"))))
                .collect()
        }
        let count = |s: &str| s.trim().parse::<usize>().map_err(|_| err(format!("bad count {s:?}")));
        let arch = field(next("architecture")?, "architecture")?.to_string();
        let hidden = count(field(next("hidden")?, "hidden")?)?;
        let architecture = match arch.as_str() {
            "linear" => Architecture::Linear,
            "hidden" if hidden > 0 => Architecture::Hidden(hidden),
            _ => return Err(err(format!("unknown architecture {arch:?}"))),
        };
        if count(field(next("class_count")?, "class_count")?)? != CLASS_COUNT {
            return Err(err("class_count must be 3".into()));
        }
        let inputs = count(field(next("inputs")?, "inputs")?)?;
        let mean = nums(field(next("mean")?, "mean")?)?;
        let std = nums(field(next("std")?, "std")?)?;
        if mean.len() != inputs || std.len() != inputs || std.iter().any(|s| !(*s > 0.0)) {
            return Err(err("feature statistics malformed".into()));
        }
        let mut model = ClassifierModel::zeros(architecture, FeatureStats { mean, std });
        for l in &mut model.layers {
            let dims: Vec<usize> =
                field(next("layer")?, "layer")?.split_whitespace().map(count).collect::<Result<_, _>>()?;
            if dims != [l.outputs, l.inputs] {
                return Err(err(format!("layer shape {dims:?} does not match {}x{}", l.outputs, l.inputs)));
            }
            let mut weights = Vec::with_capacity(l.outputs * l.inputs);
            for _ in 0..l.outputs {
                let row = nums(next("weights")?)?;
                if row.len() != l.inputs {
                    return Err(err("weight row has wrong length".into()));
                }
                weights.extend(row);
            }
            let bias = nums(next("bias")?)?;
            if bias.len() != l.outputs {
                return Err(err("bias has wrong length".into()));
            }
            l.weights = weights;
            l.bias = bias;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        fs::write(path, self.to_text())
            .map_err(|source| RasterError::IoFailure { path: path.display().to_string(), source }.into())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let text = fs::read_to_string(path).map_err(|source| {
            ClassifierError::from(RasterError::IoFailure { path: path.display().to_string(), source })
        })?;
        Self::from_text(&text)
    }
}

fn accumulate_dense(g: &mut [f64], layer: &Dense, x: &[f64], d: &[f64]) {
    let (gw, gb) = g.split_at_mut(layer.weights.len());
    for (k, &dk) in d.iter().enumerate() {
        if dk == 0.0 {
            continue;
        }
        for (gv, &xv) in gw[k * layer.inputs..(k + 1) * layer.inputs].iter_mut().zip(x) {
            *gv += dk * xv;
        }
        gb[k] += dk;
    }
}

pub fn softmax(logits: &[f64; CLASS_COUNT]) -> [f64; CLASS_COUNT] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - max).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(p: &[f64; CLASS_COUNT]) -> usize {
    (1..CLASS_COUNT).fold(0, |best, c| if p[c] > p[best] { c } else { best })
}

/// Seeded mini-batch SGD on the mean cross-entropy of `data`, with
/// features standardized by `data`'s own statistics.
pub fn train(data: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome, ClassifierError> {
    config.validate()?;
    let mut seen = [false; CLASS_COUNT];
    for &l in &data.labels {
        seen[l as usize] = true;
    }
    if let Some(c) = (0..CLASS_COUNT).find(|&c| !seen[c]) {
        return Err(ClassifierError::MissingClass(Class::ALL[c].name()));
    }

    let stats = FeatureStats::of(&data.features);
    let mut model = ClassifierModel::initialized(config.architecture, stats, config.seed);
    let d = model.input_count();
    let n = data.len();
    let mut xs = vec![0.0; n * d];
    for (x, out) in data.features.iter().zip(xs.chunks_exact_mut(d)) {
        model.stats.standardize(x, out);
    }

    let full_loss = |m: &ClassifierModel| m.batch_loss_grad(&xs, &data.labels, false).0 + config.l2 * m.l2_penalty();
    let mut history = vec![full_loss(&model)];
    // the shuffle stream is separate from the initialisation stream
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut bx = Vec::with_capacity(config.batch_size * d);
    let mut bl = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            bx.clear();
            bl.clear();
            for &i in batch {
                bx.extend_from_slice(&xs[i * d..(i + 1) * d]);
                bl.push(data.labels[i]);
            }
            let (loss, grad) = model.batch_loss_grad(&bx, &bl, true);
            if !loss.is_finite() {
                return Err(ClassifierError::DivergedLoss { epoch });
            }
            let mut params = model.params();
            let mut offset = 0;
            for l in &model.layers {
                for (k, p) in params[offset..offset + l.param_count()].iter_mut().enumerate() {
                    let decay = if k < l.weights.len() { config.l2 * *p } else { 0.0 };
                    *p -= config.learning_rate * (grad[offset + k] + decay);
                }
                offset += l.param_count();
            }
            model.set_params(&params);
        }
        let loss = full_loss(&model);
        if !loss.is_finite() {
            return Err(ClassifierError::DivergedLoss { epoch });
        }
        log::info!("epoch {epoch}: loss {loss:.6}");
        history.push(loss);
    }
    Ok(TrainOutcome { model, loss_history: history })
}

/// Largest relative difference between analytic gradients and central
/// differences (step 1e-4) of the mean loss over `batch`.
///
/// Relative error is |a − n| / max(|a|, |n|, 1e-6). For the hidden-layer
/// model, parameters whose ±step perturbation flips any ReLU on the batch
/// are skipped, since the loss is not differentiable across the kink.
pub fn gradient_check(model: &ClassifierModel, batch: &[([f32; CHANNEL_COUNT], u8)]) -> f64 {
    const STEP: f64 = 1e-4;
    let (xs, labels) = model.standardize_batch(batch);
    let analytic = model.batch_loss_grad(&xs, &labels, true).1;
    let pattern = |m: &ClassifierModel| -> Vec<bool> {
        if m.layers.len() < 2 {
            return Vec::new();
        }
        let d = m.input_count();
        let mut z = vec![0.0; m.layers[0].outputs];
        xs.chunks_exact(d)
            .flat_map(|x| {
                m.layers[0].forward(x, &mut z);
                z.iter().map(|&v| v > 0.0).collect::<Vec<_>>()
            })
            .collect()
    };
    let base_params = model.params();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for k in 0..base_params.len() {
        let mut p = base_params.clone();
        p[k] += STEP;
        probe.set_params(&p);
        let plus = probe.batch_loss_grad(&xs, &labels, false).0;
        let plus_pattern = pattern(&probe);
        p[k] -= 2.0 * STEP;
        probe.set_params(&p);
        let minus = probe.batch_loss_grad(&xs, &labels, false).0;
        if plus_pattern != pattern(&probe) {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    const BLOB_MEANS: [[f32; CHANNEL_COUNT]; 3] = [
        [0.1, 0.2, 0.1, 0.2, 0.2, -0.2, -0.1, -0.3, -0.1, -0.1],
        [0.1, 0.3, 0.1, 0.7, 0.4, 0.7, 0.5, 0.9, 0.5, 0.6],
        [0.3, 0.6, 0.05, 0.5, 0.3, 0.4, 0.1, 0.6, 0.8, 0.7],
    ];

    /// Three Gaussian blobs (σ = 0.05) in feature space.
    pub(crate) fn blobs(n: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut set = TrainingSet::default();
        for i in 0..n {
            let c = i % 3;
            set.features.push(std::array::from_fn(|k| BLOB_MEANS[c][k] + noise.sample(&mut rng) as f32));
            set.labels.push(c as u8);
        }
        set
    }

    fn batch_of(set: &TrainingSet, range: std::ops::Range<usize>) -> Vec<([f32; CHANNEL_COUNT], u8)> {
        range.map(|i| (set.features[i], set.labels[i])).collect()
    }

    fn accuracy(model: &ClassifierModel, set: &TrainingSet) -> f64 {
        let hits = set
            .features
            .iter()
            .zip(&set.labels)
            .filter(|(x, &l)| argmax(&model.probabilities(x.as_slice())) == l as usize)
            .count();
        hits as f64 / set.len() as f64
    }

    #[test]
    fn blob_means_are_far_apart() {
        for i in 0..3 {
            for j in i + 1..3 {
                let d = BLOB_MEANS[i].iter().zip(&BLOB_MEANS[j]).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
                assert!(d >= 0.5, "{i}-{j}: {d}");
            }
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(10_000, 1);
        let held_out = blobs(3_000, 2);
        let out = train(&data, &TrainConfig { seed: 3, ..TrainConfig::default() }).unwrap();
        assert!(accuracy(&out.model, &held_out) >= 0.95);
        assert!(accuracy(&out.model, &data) >= 0.99);
        assert!(out.loss_history.last().unwrap() <= &out.loss_history[0]);
        assert!(out.loss_history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn hidden_layer_trains_too() {
        let data = blobs(3_000, 4);
        let cfg = TrainConfig { architecture: Architecture::Hidden(32), learning_rate: 0.1, ..TrainConfig::default() };
        let out = train(&data, &cfg).unwrap();
        assert!(accuracy(&out.model, &blobs(1_000, 5)) >= 0.95);
    }

    #[test]
    fn config_and_data_errors() {
        let data = blobs(30, 0);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(matches!(train(&data, &cfg), Err(ClassifierError::InvalidConfig(_))));
        let mut bg = data.clone();
        bg.labels.iter_mut().for_each(|l| *l = 0);
        assert!(matches!(train(&bg, &TrainConfig::default()), Err(ClassifierError::MissingClass("crop"))));
        let cfg = TrainConfig { learning_rate: 1e300, ..TrainConfig::default() };
        let mut wild = data.clone();
        wild.features[0][0] = 1e30;
        assert!(matches!(train(&wild, &cfg), Err(ClassifierError::DivergedLoss { .. })));
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = ClassifierModel::zeros(Architecture::Linear, FeatureStats::identity(CHANNEL_COUNT));
        let stack = FeatureStack::from_planes(3, 2, vec![vec![0.3; 6]; CHANNEL_COUNT], vec![true; 6]).unwrap();
        let (mask, probs) = model.predict(&stack).unwrap();
        assert!(mask.classes().iter().all(|&c| c == 0));
        for p in &probs {
            assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
        }
    }

    #[test]
    fn invalid_pixels_are_uniform_background() {
        let data = blobs(300, 9);
        let model = train(&data, &TrainConfig::default()).unwrap().model;
        let x = data.features[1];
        let channels = (0..CHANNEL_COUNT).map(|c| vec![x[c]; 2]).collect();
        let stack = FeatureStack::from_planes(2, 1, channels, vec![true, false]).unwrap();
        let (mask, probs) = model.predict(&stack).unwrap();
        assert_eq!(mask.classes(), &[1, 0]);
        assert_eq!(probs[2][1], 1.0 / 3.0);
        let s: f32 = probs.iter().map(|p| p[0]).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = [0.3, -1.2, 2.0];
        let a = softmax(&l);
        let b = softmax(&l.map(|v| v + 17.5));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-15);
        }
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
    }

    #[test]
    fn single_pixel_gradient_closed_form() {
        let model = ClassifierModel::initialized(Architecture::Linear, FeatureStats::identity(CHANNEL_COUNT), 7);
        let x: [f32; CHANNEL_COUNT] = std::array::from_fn(|k| k as f32 * 0.1 - 0.4);
        let grad = model.gradient(&[(x, 2)]);
        let p = model.probabilities(&x);
        for k in 0..CLASS_COUNT {
            let dk = p[k] - if k == 2 { 1.0 } else { 0.0 };
            for j in 0..CHANNEL_COUNT {
                assert_eq!(grad[k * CHANNEL_COUNT + j], dk * x[j] as f64);
            }
            assert_eq!(grad[CLASS_COUNT * CHANNEL_COUNT + k], dk);
        }
    }

    #[test]
    fn gradient_checks() {
        let data = blobs(200, 11);
        let stats = FeatureStats::of(&data.features);
        let lin = ClassifierModel::initialized(Architecture::Linear, stats.clone(), 1);
        assert!(gradient_check(&lin, &batch_of(&data, 0..32)) < 1e-4);
        let hid = ClassifierModel::initialized(Architecture::Hidden(8), stats, 1);
        assert!(gradient_check(&hid, &batch_of(&data, 0..32)) < 1e-3);
    }

    #[test]
    fn small_steps_never_raise_the_loss() {
        let data = blobs(600, 12);
        let cfg = TrainConfig { learning_rate: 0.05, batch_size: 600, epochs: 8, ..TrainConfig::default() };
        let h = train(&data, &cfg).unwrap().loss_history;
        for w in h.windows(2) {
            assert!(w[1] <= w[0], "{h:?}");
        }
    }

    #[test]
    fn training_is_deterministic_across_pools() {
        let data = blobs(2_000, 13);
        let cfg = TrainConfig { architecture: Architecture::Hidden(4), seed: 5, ..TrainConfig::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train(&data, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn model_text_round_trip() {
        let data = blobs(300, 14);
        for arch in [Architecture::Linear, Architecture::Hidden(5)] {
            let m = train(&data, &TrainConfig { architecture: arch, ..TrainConfig::default() }).unwrap().model;
            assert_eq!(ClassifierModel::from_text(&m.to_text()).unwrap(), m);
        }
        assert!(ClassifierModel::from_text("agripipe-classifier 1\narchitecture conv\n").is_err());
    }

    #[test]
    fn stored_stats_are_reused() {
        let data = blobs(300, 15);
        let m = train(&data, &TrainConfig::default()).unwrap().model;
        let x = data.features[4];
        let before = m.probabilities(&x);
        // predicting on a stack with very different statistics must not
        // re-standardize
        let channels = (0..CHANNEL_COUNT).map(|c| vec![x[c], 100.0]).collect();
        let stack = FeatureStack::from_planes(2, 1, channels, vec![true; 2]).unwrap();
        let (_, probs) = m.predict(&stack).unwrap();
        for k in 0..3 {
            assert_eq!(probs[k][0], before[k] as f32);
        }
    }
}
