//! Composition of pairwise-registered captures into one canvas with
//! distance-feathered blending of overlaps.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

use crate::raster::{Band, BandKind, MultispectralImage, RasterError};
use crate::registration::{
    detect_keypoints, estimate_affine_ransac, match_descriptors, warp_band, AffineTransform, RegistrationConfig,
    RegistrationError,
};

#[derive(Debug, Error)]
pub enum MosaicError {
    #[error("no captures given")]
    NoCaptures,
    #[error("capture {0} is not connected to the reference by any pairwise transform")]
    DisconnectedGraph(usize),
    #[error("pairwise transform {from}->{to} is singular or composes to a singular map")]
    SingularComposition { from: usize, to: usize },
    #[error("pairwise edge references capture {0}, which does not exist")]
    UnknownCapture(usize),
    #[error("capture {capture} lacks band {band}")]
    MissingBand { capture: usize, band: BandKind },
    #[error("plan has {plan} transforms but {captures} captures were given")]
    PlanMismatch { plan: usize, captures: usize },
    #[error("mosaic plan file: {0}")]
    Parse(String),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// `transform` maps pixel coordinates of capture `from` into capture `to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseTransform {
    pub from: usize,
    pub to: usize,
    pub transform: AffineTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    /// Reference-frame coordinates of canvas pixel (0, 0).
    pub origin_x: i64,
    pub origin_y: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosaicPlan {
    pub reference_index: usize,
    /// Per capture, the map from its pixel coordinates to the reference frame.
    pub transforms: Vec<AffineTransform>,
    pub canvas: Canvas,
}

impl MosaicPlan {
    /// Map from capture `k` pixels to canvas pixels.
    pub fn canvas_transform(&self, k: usize) -> AffineTransform {
        self.transforms[k]
            .then(&AffineTransform::translation(-self.canvas.origin_x as f64, -self.canvas.origin_y as f64))
    }

    /// Header line `canvas <w> <h> <origin_x> <origin_y> <reference>`, then
    /// one line of six coefficients per capture.
    pub fn to_text(&self) -> String {
        let c = &self.canvas;
        let mut s = format!("canvas {} {} {} {} {}\n", c.width, c.height, c.origin_x, c.origin_y, self.reference_index);
        for t in &self.transforms {
            let _ = write!(s, "{}", t.to_text());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MosaicError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| MosaicError::Parse("empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad = || MosaicError::Parse(format!("bad header {header:?}"));
        if fields.len() != 6 || fields[0] != "canvas" {
            return Err(bad());
        }
        let canvas = Canvas {
            width: fields[1].parse().map_err(|_| bad())?,
            height: fields[2].parse().map_err(|_| bad())?,
            origin_x: fields[3].parse().map_err(|_| bad())?,
            origin_y: fields[4].parse().map_err(|_| bad())?,
        };
        let reference_index: usize = fields[5].parse().map_err(|_| bad())?;
        let transforms = lines
            .map(|l| AffineTransform::from_text(l).map_err(|e| MosaicError::Parse(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if reference_index >= transforms.len() {
            return Err(bad());
        }
        Ok(MosaicPlan { reference_index, transforms, canvas })
    }
}

/// Chains pairwise transforms along a breadth-first tree rooted at capture
/// 0 and sizes the canvas to the bounding box of every warped corner.
pub fn plan_mosaic(sizes: &[(usize, usize)], pairwise: &[PairwiseTransform]) -> Result<MosaicPlan, MosaicError> {
    let n = sizes.len();
    if n == 0 {
        return Err(MosaicError::NoCaptures);
    }
    // adjacency: (neighbour, map from neighbour coords into this node's coords)
    let mut adjacency: Vec<Vec<(usize, AffineTransform, usize, usize)>> = vec![Vec::new(); n];
    for e in pairwise {
        if e.from >= n {
            return Err(MosaicError::UnknownCapture(e.from));
        }
        if e.to >= n {
            return Err(MosaicError::UnknownCapture(e.to));
        }
        let inverse = e.transform.inverse().map_err(|_| MosaicError::SingularComposition { from: e.from, to: e.to })?;
        adjacency[e.to].push((e.from, e.transform, e.from, e.to));
        adjacency[e.from].push((e.to, inverse, e.from, e.to));
    }

    let mut transforms: Vec<Option<AffineTransform>> = vec![None; n];
    transforms[0] = Some(AffineTransform::IDENTITY);
    let mut queue = VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        let to_ref = transforms[u].unwrap();
        for &(v, v_to_u, from, to) in &adjacency[u] {
            if transforms[v].is_some() {
                continue;
            }
            let composed = v_to_u.then(&to_ref);
            if !composed.is_invertible() {
                return Err(MosaicError::SingularComposition { from, to });
            }
            transforms[v] = Some(composed);
            queue.push_back(v);
        }
    }
    let transforms: Vec<AffineTransform> = transforms
        .into_iter()
        .enumerate()
        .map(|(k, t)| t.ok_or(MosaicError::DisconnectedGraph(k)))
        .collect::<Result<_, _>>()?;

    let (mut min_x, mut min_y, mut max_x, mut max_y) =
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (t, &(w, h)) in transforms.iter().zip(sizes) {
        let (w, h) = ((w - 1) as f64, (h - 1) as f64);
        for (x, y) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let (u, v) = t.apply(x, y);
            min_x = min_x.min(u);
            min_y = min_y.min(v);
            max_x = max_x.max(u);
            max_y = max_y.max(v);
        }
    }
    // tolerate rounding noise so integer layouts do not grow a pixel
    let floor = |v: f64| (v + 1e-9).floor();
    let ceil = |v: f64| (v - 1e-9).ceil();
    let (x0, y0) = (floor(min_x), floor(min_y));
    let canvas = Canvas {
        width: (ceil(max_x) - x0) as usize + 1,
        height: (ceil(max_y) - y0) as usize + 1,
        origin_x: x0 as i64,
        origin_y: y0 as i64,
    };
    Ok(MosaicPlan { reference_index: 0, transforms, canvas })
}

/// Squared Euclidean distance transform along one line
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Euclidean distance from each inside pixel to the nearest outside pixel,
/// treating everything beyond the raster as outside. Outside pixels get 0.
pub fn distance_to_outside(inside: &[bool], width: usize, height: usize) -> Vec<f64> {
    let (pw, ph) = (width + 2, height + 2);
    const BIG: f64 = 1e20;
    let mut grid = vec![0.0f64; pw * ph];
    for y in 0..height {
        for x in 0..width {
            if inside[y * width + x] {
                grid[(y + 1) * pw + x + 1] = BIG;
            }
        }
    }
    let mut line_in = vec![0.0; pw.max(ph)];
    let mut line_out = vec![0.0; pw.max(ph)];
    for y in 0..ph {
        line_in[..pw].copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        edt_1d(&line_in[..pw], &mut line_out[..pw]);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&line_out[..pw]);
    }
    for x in 0..pw {
        for y in 0..ph {
            line_in[y] = grid[y * pw + x];
        }
        edt_1d(&line_in[..ph], &mut line_out[..ph]);
        for y in 0..ph {
            grid[y * pw + x] = line_out[y];
        }
    }
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push(grid[(y + 1) * pw + x + 1].sqrt());
        }
    }
    out
}

/// Warps every capture into the canvas and blends overlaps with weights
/// proportional to each pixel's distance from its capture's footprint edge.
pub fn render_mosaic(captures: &[MultispectralImage], plan: &MosaicPlan) -> Result<MultispectralImage, MosaicError> {
    if captures.is_empty() {
        return Err(MosaicError::NoCaptures);
    }
    if plan.transforms.len() != captures.len() {
        return Err(MosaicError::PlanMismatch { plan: plan.transforms.len(), captures: captures.len() });
    }
    let (cw, ch) = (plan.canvas.width, plan.canvas.height);
    let kinds = captures[plan.reference_index].kinds();
    let canvas_maps: Vec<AffineTransform> = (0..captures.len()).map(|k| plan.canvas_transform(k)).collect();

    let mut bands = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let mut layers: Vec<(Band, Vec<f64>)> = Vec::with_capacity(captures.len());
        for (k, capture) in captures.iter().enumerate() {
            let band = capture.band(kind).ok_or(MosaicError::MissingBand { capture: k, band: kind })?;
            let warped = warp_band(band, &canvas_maps[k], cw, ch)?;
            let weights = distance_to_outside(warped.valid(), cw, ch);
            layers.push((warped, weights));
        }
        let mut values = vec![0.0f32; cw * ch];
        let mut valid = vec![false; cw * ch];
        let mut contrib: Vec<(f64, f32)> = Vec::with_capacity(layers.len());
        for i in 0..cw * ch {
            contrib.clear();
            contrib.extend(layers.iter().filter(|(b, _)| b.valid()[i]).map(|(b, w)| (w[i], b.values()[i])));
            match contrib.len() {
                0 => {}
                1 => {
                    values[i] = contrib[0].1;
                    valid[i] = true;
                }
                _ => {
                    // canonical order makes the sum independent of capture order
                    contrib.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                    let (num, den) = contrib.iter().fold((0.0f64, 0.0f64), |(n, d), &(w, v)| (n + w * v as f64, d + w));
                    values[i] = (num / den) as f32;
                    valid[i] = true;
                }
            }
        }
        bands.push(Band::with_mask(kind, cw, ch, values, valid)?);
    }
    let mut out = MultispectralImage::new(bands)?;
    out.georef = captures[plan.reference_index].georef;
    Ok(out)
}

/// Estimates the transform mapping `moving` pixels into `reference` pixels
/// from keypoint matches (no NCC validation; overlaps may be partial).
pub fn estimate_pairwise(
    reference: &Band,
    moving: &Band,
    config: &RegistrationConfig,
) -> Result<AffineTransform, MosaicError> {
    let kr = detect_keypoints(reference, &config.detector)?;
    let km = detect_keypoints(moving, &config.detector)?;
    let matches = match_descriptors(&km, &kr, config.ratio);
    Ok(estimate_affine_ransac(&matches, &km, &kr, &config.ransac)?.transform)
}
