//! Acceptance harness: one check per criterion, each printing a PASS/FAIL
//! line with its measurement and wall time. Tolerances and time budgets are
//! pinned here and must not be loosened.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use agripipe::classifier::{gradient_check, Architecture, ClassifierModel, FeatureStats};
use agripipe::dataset::{augment_tile, split_tiles, tile_origins, Augmentation, Tile};
use agripipe::evaluation::{compute_metrics, confusion, MetricsReport};
use agripipe::indices::{build_feature_stack, compute_index, IndexKind, CHANNEL_COUNT};
use agripipe::pipeline::{
    artifact_digests, read_metrics_record, read_png_rgb, run_stages, Palette, PipelineConfig, Stage,
};
use agripipe::preprocess::{apply_calibration, derive_calibration, Rect};
use agripipe::raster::{Band, BandKind, LabelMask, MultispectralImage, CLASS_COUNT};
use agripipe::registration::{estimate_affine_points, warp_band, AffineTransform, RansacConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Harness {
    failures: Vec<String>,
}

impl Harness {
    fn run(&mut self, id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let over = budget.is_some_and(|b| elapsed > b);
        let budget_text = budget.map_or(String::new(), |b| format!(" budget {:.0?}", b));
        let (status, detail) = match outcome {
            Ok(d) if !over => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over time budget")),
            Err(d) => ("FAIL", d),
        };
        println!("{status} criterion {id:>2} [{name}] {detail} ({elapsed:.2?}{budget_text})");
        if status == "FAIL" {
            self.failures.push(format!("criterion {id} [{name}]: {detail}"));
        }
    }
}

// ---- 1: vegetation indices against independent scalar formulas ----

fn oracle_index(kind: IndexKind, n: f64, r: f64, g: f64, b: f64, l: f64) -> f64 {
    match kind {
        IndexKind::Ndvi => (n - r) / (n + r),
        IndexKind::Gndvi => (n - g) / (n + g),
        IndexKind::Evi => {
            let e = 2.5 * (n - r) / (n + 6.0 * r - 7.5 * b + 1.0);
            e.clamp(-2.5, 2.5)
        }
        IndexKind::Savi => (1.0 + l) * (n - r) / (n + r + l),
        IndexKind::Msavi => {
            let k = 2.0 * n + 1.0;
            (k - (k * k - 8.0 * (n - r)).sqrt()) / 2.0
        }
    }
}

fn criterion_indices() -> Outcome {
    const N: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let tuples: Vec<[f32; 5]> = (0..N).map(|_| std::array::from_fn(|_| rng.random::<f32>())).collect();
    let band = |k: BandKind, i: usize| Band::new(k, N, 1, tuples.iter().map(|t| t[i]).collect()).expect("band");
    let image = MultispectralImage::new(vec![
        band(BandKind::Red, 0),
        band(BandKind::Green, 1),
        band(BandKind::Blue, 2),
        band(BandKind::Nir, 3),
        band(BandKind::RedEdge, 4),
    ])
    .expect("image");
    let l = 0.5;
    let mut worst = 0.0f64;
    for kind in IndexKind::ALL {
        let plane = compute_index(&image, kind, l).map_err(|e| e.to_string())?;
        for (i, t) in tuples.iter().enumerate() {
            let (r, g, b, n) = (t[0] as f64, t[1] as f64, t[2] as f64, t[3] as f64);
            let want = oracle_index(kind, n, r, g, b, l);
            if !want.is_finite() {
                continue;
            }
            if !plane.valid[i] {
                return Err(format!("{kind} invalid at sample {i} where the oracle gives {want}"));
            }
            let scalar = kind.evaluate(n, r, g, b, l).ok_or(format!("{kind} scalar missing at {i}"))?;
            worst = worst.max((scalar - want).abs()).max((plane.values[i] as f64 - want).abs());
        }
    }
    let min_disc = tuples
        .iter()
        .map(|t| {
            let (r, n) = (t[0] as f64, t[3] as f64);
            (2.0 * n + 1.0).powi(2) - 8.0 * (n - r)
        })
        .fold(f64::INFINITY, f64::min);
    let savi0 = tuples
        .iter()
        .filter_map(|t| {
            let (r, n) = (t[0] as f64, t[3] as f64);
            Some(
                (IndexKind::Savi.evaluate(n, r, 0.0, 0.0, 0.0)? - IndexKind::Ndvi.evaluate(n, r, 0.0, 0.0, 0.0)?).abs(),
            )
        })
        .fold(0.0f64, f64::max);
    check(
        worst < 1e-6 && min_disc >= 0.0 && savi0 < 1e-9,
        format!("max |err| {worst:.2e} (< 1e-6), min MSAVI discriminant {min_disc:.3} (>= 0), max |SAVI(L=0) - NDVI| {savi0:.1e} (< 1e-9)"),
    )
}

// ---- 2: calibration round trip ----

fn criterion_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(16..64), rng.random_range(16..64));
        let bands = BandKind::ALL
            .iter()
            .map(|&k| {
                let level = rng.random_range(20.0..4000.0f32);
                let values = (0..w * h).map(|_| level * rng.random_range(0.9..1.1f32)).collect();
                Band::new(k, w, h, values).expect("band")
            })
            .collect();
        let panel = MultispectralImage::new(bands).expect("panel");
        let (rw, rh) = (rng.random_range(4..w), rng.random_range(4..h));
        let region = Rect::new(rng.random_range(0..=w - rw), rng.random_range(0..=h - rh), rw, rh);
        let targets: BTreeMap<BandKind, f64> =
            BandKind::ALL.iter().map(|&k| (k, rng.random_range(0.05..1.0))).collect();
        let record = derive_calibration(&panel, region, &targets).map_err(|e| e.to_string())?;
        let calibrated = apply_calibration(&panel, &record).map_err(|e| e.to_string())?;
        for (&k, &r) in &targets {
            let band = calibrated.band(k).expect("band kept");
            let mut sum = 0.0;
            for y in region.y..region.y + region.height {
                for x in region.x..region.x + region.width {
                    sum += band.get(x, y) as f64;
                }
            }
            worst = worst.max((sum / (region.width * region.height) as f64 - r).abs());
        }
    }
    check(worst < 1e-6, format!("max |panel mean - r_target| {worst:.2e} over 100 panels (< 1e-6)"))
}

// ---- 3: RANSAC recovery ----

fn random_affine(rng: &mut ChaCha8Rng, extent: f64) -> AffineTransform {
    let theta: f64 = rng.random_range(-0.3..0.3);
    let (sx, sy) = (rng.random_range(0.85..1.15), rng.random_range(0.85..1.15));
    let shear: f64 = rng.random_range(-0.1..0.1);
    let (c, s) = (theta.cos(), theta.sin());
    let t = (rng.random_range(-0.1..0.1) * extent, rng.random_range(-0.1..0.1) * extent);
    AffineTransform::new([c * sx, -s * sy + shear, t.0, s * sx, c * sy, t.1])
}

fn corner_rms(a: &AffineTransform, b: &AffineTransform, w: f64, h: f64) -> f64 {
    let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
    let ss: f64 = corners
        .iter()
        .map(|&(x, y)| {
            let (p, q) = (a.apply(x, y), b.apply(x, y));
            (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)
        })
        .sum();
    (ss / 4.0).sqrt()
}

fn criterion_ransac() -> Outcome {
    const EXTENT: f64 = 512.0;
    const INLIERS: usize = 100;
    // 40% of all correspondences are outliers: 100 inliers + 67 outliers
    const OUTLIERS: usize = 67;
    let noise = Normal::new(0.0, 0.3).expect("sigma");
    let mut recovered = 0;
    let mut worst_ok = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let truth = random_affine(&mut rng, EXTENT);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for _ in 0..INLIERS {
            let p = (rng.random_range(0.0..EXTENT), rng.random_range(0.0..EXTENT));
            let q = truth.apply(p.0, p.1);
            src.push(p);
            dst.push((q.0 + noise.sample(&mut rng), q.1 + noise.sample(&mut rng)));
        }
        for _ in 0..OUTLIERS {
            src.push((rng.random_range(0.0..EXTENT), rng.random_range(0.0..EXTENT)));
            dst.push((rng.random_range(0.0..EXTENT), rng.random_range(0.0..EXTENT)));
        }
        // interleave so outliers are not a contiguous block
        let mut order: Vec<usize> = (0..src.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let src: Vec<_> = order.iter().map(|&i| src[i]).collect();
        let dst: Vec<_> = order.iter().map(|&i| dst[i]).collect();
        let config = RansacConfig { seed: trial, ..RansacConfig::default() };
        if let Ok(fit) = estimate_affine_points(&src, &dst, &config) {
            let rms = corner_rms(&fit.transform, &truth, EXTENT, EXTENT);
            if rms < 0.5 {
                recovered += 1;
                worst_ok = worst_ok.max(rms);
            }
        }
    }
    check(
        recovered >= 95,
        format!("{recovered}/100 trials with corner RMS < 0.5 px (need >= 95), worst recovered {worst_ok:.3} px"),
    )
}

// ---- 4: warp round trip ----

fn criterion_warp() -> Outcome {
    const S: usize = 128;
    const MARGIN: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.random_range(0.02..0.08), rng.random_range(0.02..0.08), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let image = Band::from_fn(BandKind::Nir, S, S, |x, y| {
            let v: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            (0.5 + v / 6.0) as f32
        })
        .expect("band");
        // small random affine about the centre
        let c = S as f64 / 2.0;
        let local = random_affine(&mut rng, 40.0);
        let a = AffineTransform::translation(-c, -c).then(&local).then(&AffineTransform::translation(c, c));
        let inv = a.inverse().map_err(|e| e.to_string())?;
        let there = warp_band(&image, &a, S, S).map_err(|e| e.to_string())?;
        let back = warp_band(&there, &inv, S, S).map_err(|e| e.to_string())?;
        let (mut sum, mut n) = (0.0, 0usize);
        for y in MARGIN..S - MARGIN {
            for x in MARGIN..S - MARGIN {
                if back.is_valid(x, y) {
                    sum += (back.get(x, y) - image.get(x, y)).abs() as f64;
                    n += 1;
                }
            }
        }
        if n < (S - 2 * MARGIN).pow(2) / 4 {
            return Err(format!("only {n} interior pixels survived the round trip"));
        }
        worst = worst.max(sum / n as f64);
    }
    check(worst < 0.01, format!("worst interior MAE {worst:.2e} over 20 affines (< 0.01)"))
}

// ---- 5: metrics against a brute-force oracle ----

fn criterion_metrics() -> Outcome {
    const S: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let gt: Vec<u8> = (0..S * S).map(|_| rng.random_range(0..CLASS_COUNT as u8)).collect();
        let pred: Vec<u8> = gt
            .iter()
            .map(|&g| if rng.random::<f64>() < 0.6 { g } else { rng.random_range(0..CLASS_COUNT as u8) })
            .collect();
        let gm = LabelMask::new(S, S, gt.clone()).expect("mask");
        let pm = LabelMask::new(S, S, pred.clone()).expect("mask");
        let cm = confusion(&gm, &pm, None).map_err(|e| e.to_string())?;
        let report = compute_metrics(&cm).map_err(|e| e.to_string())?;

        let mut counts = [[0u64; CLASS_COUNT]; CLASS_COUNT];
        for (&g, &p) in gt.iter().zip(&pred) {
            counts[g as usize][p as usize] += 1;
        }
        if counts != cm.counts {
            return Err("confusion counts differ from the brute-force tally".into());
        }
        let correct = gt.iter().zip(&pred).filter(|(g, p)| g == p).count();
        let mut diffs = vec![(report.accuracy - correct as f64 / (S * S) as f64).abs()];
        let (mut f1s, mut ious, mut dices, mut precs) = (vec![], vec![], vec![], vec![]);
        for c in 0..CLASS_COUNT as u8 {
            let a: BTreeSet<usize> = (0..S * S).filter(|&i| gt[i] == c).collect();
            let b: BTreeSet<usize> = (0..S * S).filter(|&i| pred[i] == c).collect();
            let inter = a.intersection(&b).count() as f64;
            let union = a.union(&b).count() as f64;
            let precision = inter / b.len() as f64;
            let recall = inter / a.len() as f64;
            let f1 = 2.0 * precision * recall / (precision + recall);
            let iou = inter / union;
            let dice = 2.0 * inter / (a.len() + b.len()) as f64;
            let m = &report.per_class[c as usize];
            diffs.extend([
                (m.precision - precision).abs(),
                (m.recall - recall).abs(),
                (m.f1 - f1).abs(),
                (m.iou - iou).abs(),
                (m.dice - dice).abs(),
            ]);
            f1s.push(f1);
            ious.push(iou);
            dices.push(dice);
            precs.push(precision);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        diffs.extend([
            (report.mean_f1 - mean(&f1s)).abs(),
            (report.miou - mean(&ious)).abs(),
            (report.mdc - mean(&dices)).abs(),
            (report.mean_precision - mean(&precs)).abs(),
        ]);
        worst = diffs.into_iter().fold(worst, f64::max);
    }
    check(worst <= 1e-12, format!("counts exact on 200 pairs, max metric |diff| {worst:.1e} (<= 1e-12)"))
}

// ---- 6: gradient check ----

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut worst_linear, mut worst_hidden) = (0.0f64, 0.0f64);
    for batch_no in 0..10u64 {
        let batch: Vec<([f32; CHANNEL_COUNT], u8)> = (0..32)
            .map(|_| (std::array::from_fn(|_| rng.random_range(-1.0..1.0)), rng.random_range(0..CLASS_COUNT as u8)))
            .collect();
        let stats = FeatureStats::identity(CHANNEL_COUNT);
        let linear = ClassifierModel::initialized(Architecture::Linear, stats.clone(), batch_no);
        let hidden = ClassifierModel::initialized(Architecture::Hidden(16), stats, batch_no);
        worst_linear = worst_linear.max(gradient_check(&linear, &batch));
        worst_hidden = worst_hidden.max(gradient_check(&hidden, &batch));
    }
    check(
        worst_linear < 1e-4 && worst_hidden < 1e-3,
        format!("max relative error linear {worst_linear:.2e} (< 1e-4), hidden {worst_hidden:.2e} (< 1e-3)"),
    )
}

// ---- 7: tiling arithmetic and split ----

fn criterion_tiling() -> Outcome {
    let origins = tile_origins(1024, 1024, 512, 256).map_err(|e| e.to_string())?;
    let ids: Vec<String> = (0..100).map(|i| format!("f_x{}_y0", i * 8)).collect();
    let a = split_tiles(&ids, 17).map_err(|e| e.to_string())?;
    let b = split_tiles(&ids, 17).map_err(|e| e.to_string())?;
    let sizes = (a.train.len(), a.val.len(), a.test.len());
    let mut all: Vec<&String> = a.train.iter().chain(&a.val).chain(&a.test).collect();
    all.sort();
    all.dedup();
    check(
        origins.len() == 9 && sizes == (70, 10, 20) && a.to_text() == b.to_text() && all.len() == 100,
        format!(
            "{} tiles for 1024²/512/256 (9), split {sizes:?} (70, 10, 20), manifest reproducible: {}",
            origins.len(),
            a.to_text() == b.to_text()
        ),
    )
}

// ---- 8: augmentation ----

fn criterion_augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let n = 32;
    let bands = BandKind::ALL
        .iter()
        .map(|&k| Band::new(k, n, n, (0..n * n).map(|_| rng.random_range(0.01..1.0f32)).collect()).expect("band"))
        .collect();
    let image = MultispectralImage::new(bands).expect("image");
    let features = build_feature_stack(&image, 0.5).map_err(|e| e.to_string())?;
    let labels =
        LabelMask::new(n, n, (0..n * n).map(|_| rng.random_range(0..CLASS_COUNT as u8)).collect()).expect("labels");
    let tile = Tile { features, labels, origin: (0, 0), source_id: "t".into(), variant: None };
    let variants = augment_tile(&tile).map_err(|e| e.to_string())?;
    let rot180 = variants.iter().find(|t| t.variant == Some(Augmentation::Rot180)).ok_or("no rot180 variant")?;
    let twice = augment_tile(rot180)
        .map_err(|e| e.to_string())?
        .into_iter()
        .find(|t| t.variant == Some(Augmentation::Rot180))
        .ok_or("no rot180 variant")?;
    let identity = twice.features == tile.features && twice.labels == tile.labels;
    let histogram = tile.labels.histogram();
    let preserved =
        variants.iter().filter(|t| t.variant != Some(Augmentation::Blur)).all(|t| t.labels.histogram() == histogram);
    let geometric = variants.iter().filter(|t| t.variant != Some(Augmentation::Blur)).count();
    check(
        variants.len() == 6 && identity && preserved && geometric == 5,
        format!(
            "{} variants (6), rot180∘rot180 identity: {identity}, class counts preserved under {geometric} geometric variants: {preserved}",
            variants.len()
        ),
    )
}

// ---- 9 & 10: end-to-end run and determinism ----

const E2E_STAGES: [Stage; 10] = [
    Stage::Synth,
    Stage::Calibrate,
    Stage::Features,
    Stage::Tile,
    Stage::Split,
    Stage::Augment,
    Stage::Train,
    Stage::Predict,
    Stage::Evaluate,
    Stage::Render,
];

/// Seed-7 1024² synthetic field with 256-pixel dataset tiles; 512-pixel
/// tiles would leave only four tiles, too few for a three-way split.
fn e2e_config(dir: &Path, jobs: usize) -> PipelineConfig {
    let text = format!(
        "seed=7\nsynth.size=1024\njobs={jobs}\ncalibrate.input=field.msr\ntile.size=256\ntile.stride=128\n\
         train.architecture=linear\ntrain.epochs=5\nevaluate.split=test\n"
    );
    let mut cfg = PipelineConfig::parse(&text, dir).expect("config");
    cfg.set_out_dir(dir.join(format!("jobs{jobs}")));
    cfg
}

fn run_e2e(dir: &Path, jobs: usize) -> Result<PipelineConfig, String> {
    let cfg = e2e_config(dir, jobs);
    run_stages(&E2E_STAGES, &cfg).map_err(|e| format!("pipeline failed: {e}"))?;
    Ok(cfg)
}

fn criterion_end_to_end(dir: &Path) -> Outcome {
    let cfg = run_e2e(dir, 4)?;
    let record = read_metrics_record(&cfg.out_dir().join("metrics.txt")).map_err(|e| e.to_string())?;
    let accuracy = MetricsReport::record_value(&record, "accuracy").ok_or("no accuracy")?;
    let miou = MetricsReport::record_value(&record, "miou").ok_or("no miou")?;
    let (w, h, pixels) = read_png_rgb(&cfg.out_dir().join("prediction.png")).map_err(|e| e.to_string())?;
    let palette = Palette::default();
    let used: BTreeSet<[u8; 3]> = pixels.iter().copied().collect();
    let expected: BTreeSet<[u8; 3]> = palette.0.iter().copied().collect();
    check(
        accuracy >= 0.90 && miou >= 0.70 && (w, h) == (1024, 1024) && used == expected,
        format!(
            "test-split accuracy {accuracy:.4} (>= 0.90), mIOU {miou:.4} (>= 0.70), PNG {w}x{h} colours {:?}",
            used
        ),
    )
}

fn criterion_determinism(dir: &Path) -> Outcome {
    let first = e2e_config(dir, 4).out_dir();
    let cfg = run_e2e(dir, 1)?;
    let a = artifact_digests(&first).map_err(|e| e.to_string())?;
    let b = artifact_digests(&cfg.out_dir()).map_err(|e| e.to_string())?;
    if a.is_empty() {
        return Err("first run produced no artifacts".into());
    }
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    check(
        a.len() == b.len() && differing.is_empty(),
        format!(
            "{} artifacts compared between --jobs 4 and --jobs 1, {} differ {:?}",
            a.len(),
            differing.len(),
            differing
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut h = Harness { failures: Vec::new() };
    h.run(1, "index closed forms", Some(Duration::from_secs(1)), criterion_indices);
    h.run(2, "calibration round trip", Some(Duration::from_secs(1)), criterion_calibration);
    h.run(3, "RANSAC recovery", Some(Duration::from_secs(30)), criterion_ransac);
    h.run(4, "warp round trip", Some(Duration::from_secs(10)), criterion_warp);
    h.run(5, "metric oracle", Some(Duration::from_secs(5)), criterion_metrics);
    h.run(6, "gradient check", Some(Duration::from_secs(5)), criterion_gradients);
    h.run(7, "tiling arithmetic", None, criterion_tiling);
    h.run(8, "augmentation", None, criterion_augmentation);
    h.run(9, "end-to-end run", Some(Duration::from_secs(300)), || criterion_end_to_end(dir.path()));
    h.run(10, "determinism", Some(Duration::from_secs(300)), || criterion_determinism(dir.path()));
    assert!(h.failures.is_empty(), "failed:\n{}", h.failures.join("\n"));
}
