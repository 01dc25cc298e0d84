//! Scale-space keypoints: difference-of-Gaussian extrema with a dominant
//! orientation and a 4×4×8 gradient-orientation histogram descriptor.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::RegistrationError;
use crate::filters::gaussian_blur;
use crate::raster::Band;

pub const DESCRIPTOR_LEN: usize = 128;
const DESC_GRID: usize = 4;
const DESC_BINS: usize = 8;
const ORI_BINS: usize = 36;
const BORDER: usize = 5;
const MAX_REFINE_STEPS: usize = 5;
const MIN_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub octaves: usize,
    pub intervals: usize,
    /// Blur of the first scale level.
    pub base_sigma: f64,
    /// Blur assumed to be present in the input.
    pub input_sigma: f64,
    /// Minimum |DoG| at the refined extremum, image scaled to `[0, 1]`.
    pub contrast_threshold: f64,
    /// Maximum ratio of principal curvatures.
    pub edge_ratio: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            octaves: 3,
            intervals: 3,
            base_sigma: 1.6,
            input_sigma: 0.5,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Blur sigma of the detection scale, in input pixels.
    pub scale: f64,
    /// Radians in `[0, 2π)`, measured in image coordinates (y down).
    pub orientation: f64,
    pub response: f64,
    /// Unit-length descriptor.
    pub descriptor: [f32; DESCRIPTOR_LEN],
}

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x] as f64
    }

    fn blurred(&self, sigma: f64) -> Plane {
        Plane { w: self.w, h: self.h, data: gaussian_blur(&self.data, self.w, self.h, sigma) }
    }

    fn downsampled(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.data[2 * y * self.w + 2 * x]);
            }
        }
        Plane { w, h, data }
    }
}

struct Octave {
    index: usize,
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

/// Min-max scales valid pixels to `[0, 1]`; invalid pixels take the mean.
fn unit_plane(band: &Band) -> Plane {
    let (mut lo, mut hi, mut sum, mut n) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64, 0usize);
    for (&v, &ok) in band.values().iter().zip(band.valid()) {
        if ok {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v as f64;
            n += 1;
        }
    }
    let range = hi - lo;
    let fill = if n > 0 && range > 0.0 { ((sum / n as f64) as f32 - lo) / range } else { 0.0 };
    let data = band
        .values()
        .iter()
        .zip(band.valid())
        .map(|(&v, &ok)| {
            if !ok {
                fill
            } else if range > 0.0 {
                (v - lo) / range
            } else {
                0.0
            }
        })
        .collect();
    Plane { w: band.width(), h: band.height(), data }
}

fn build_octaves(base: Plane, config: &DetectorConfig) -> Vec<Octave> {
    let s = config.intervals;
    let k = 2f64.powf(1.0 / s as f64);
    // incremental blur between consecutive levels within an octave
    let increments: Vec<f64> = (1..s + 3)
        .map(|i| {
            let prev = config.base_sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();
    let mut octaves = Vec::new();
    let mut first = base;
    for index in 0..config.octaves {
        if first.w < 2 * BORDER + 3 || first.h < 2 * BORDER + 3 {
            break;
        }
        let mut gauss = vec![first];
        for &inc in &increments {
            let next = gauss.last().unwrap().blurred(inc);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|p| Plane {
                w: p[0].w,
                h: p[0].h,
                data: p[1].data.iter().zip(&p[0].data).map(|(b, a)| b - a).collect(),
            })
            .collect();
        first = gauss[s].downsampled();
        octaves.push(Octave { index, gauss, dog });
    }
    octaves
}

/// Detects keypoints on one band.
pub fn detect_keypoints(band: &Band, config: &DetectorConfig) -> Result<Vec<Keypoint>, RegistrationError> {
    if band.width() < MIN_SIZE || band.height() < MIN_SIZE {
        return Err(RegistrationError::ImageTooSmall { width: band.width(), height: band.height() });
    }
    let unit = unit_plane(band);
    let initial = (config.base_sigma.powi(2) - config.input_sigma.powi(2)).max(0.01).sqrt();
    let octaves = build_octaves(unit.blurred(initial), config);

    let mut keypoints: Vec<Keypoint> = octaves
        .par_iter()
        .flat_map_iter(|oct| detect_in_octave(oct, config))
        .filter(|kp| {
            let (x, y) = (kp.x.round() as usize, kp.y.round() as usize);
            x < band.width() && y < band.height() && band.is_valid(x, y)
        })
        .collect();
    keypoints
        .sort_by(|a, b| (a.y, a.x, a.scale, a.orientation).partial_cmp(&(b.y, b.x, b.scale, b.orientation)).unwrap());
    Ok(keypoints)
}

fn detect_in_octave(oct: &Octave, config: &DetectorConfig) -> Vec<Keypoint> {
    let s = config.intervals;
    let (w, h) = (oct.dog[0].w, oct.dog[0].h);
    let prefilter = 0.5 * config.contrast_threshold;
    let mut out = Vec::new();
    for layer in 1..=s {
        let (below, cur, above) = (&oct.dog[layer - 1], &oct.dog[layer], &oct.dog[layer + 1]);
        for y in BORDER..h - BORDER {
            for x in BORDER..w - BORDER {
                let v = cur.at(x, y);
                if v.abs() <= prefilter || !is_extremum(v, x, y, below, cur, above) {
                    continue;
                }
                if let Some(found) = refine(oct, layer, x, y, config) {
                    out.extend(describe(oct, &found, config));
                }
            }
        }
    }
    out
}

fn is_extremum(v: f64, x: usize, y: usize, below: &Plane, cur: &Plane, above: &Plane) -> bool {
    let is_max = v > 0.0;
    for plane in [below, cur, above] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if std::ptr::eq(plane, cur) && xx == x && yy == y {
                    continue;
                }
                let n = plane.at(xx, yy);
                if (is_max && n >= v) || (!is_max && n <= v) {
                    return false;
                }
            }
        }
    }
    true
}

struct Extremum {
    /// Position in octave pixels.
    x: f64,
    y: f64,
    /// Fractional layer index.
    layer: f64,
    response: f64,
}

fn refine(oct: &Octave, layer0: usize, x0: usize, y0: usize, config: &DetectorConfig) -> Option<Extremum> {
    let s = config.intervals;
    let (w, h) = (oct.dog[0].w, oct.dog[0].h);
    let (mut x, mut y, mut layer) = (x0, y0, layer0);
    for _ in 0..MAX_REFINE_STEPS {
        let (d0, d1, d2) = (&oct.dog[layer - 1], &oct.dog[layer], &oct.dog[layer + 1]);
        let c = d1.at(x, y);
        let g = [
            0.5 * (d1.at(x + 1, y) - d1.at(x - 1, y)),
            0.5 * (d1.at(x, y + 1) - d1.at(x, y - 1)),
            0.5 * (d2.at(x, y) - d0.at(x, y)),
        ];
        let dxx = d1.at(x + 1, y) + d1.at(x - 1, y) - 2.0 * c;
        let dyy = d1.at(x, y + 1) + d1.at(x, y - 1) - 2.0 * c;
        let dss = d2.at(x, y) + d0.at(x, y) - 2.0 * c;
        let dxy = 0.25 * (d1.at(x + 1, y + 1) - d1.at(x - 1, y + 1) - d1.at(x + 1, y - 1) + d1.at(x - 1, y - 1));
        let dxs = 0.25 * (d2.at(x + 1, y) - d2.at(x - 1, y) - d0.at(x + 1, y) + d0.at(x - 1, y));
        let dys = 0.25 * (d2.at(x, y + 1) - d2.at(x, y - 1) - d0.at(x, y + 1) + d0.at(x, y - 1));
        let hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
        let offset = solve3(&hess, &g).map(|o| [-o[0], -o[1], -o[2]])?;

        if offset.iter().all(|o| o.abs() < 0.5) {
            let response = c + 0.5 * (g[0] * offset[0] + g[1] * offset[1] + g[2] * offset[2]);
            if response.abs() < config.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = config.edge_ratio;
            if det <= 0.0 || tr * tr * r >= (r + 1.0).powi(2) * det {
                return None;
            }
            return Some(Extremum {
                x: x as f64 + offset[0],
                y: y as f64 + offset[1],
                layer: layer as f64 + offset[2],
                response,
            });
        }
        if offset.iter().any(|o| o.abs() > (w.max(h)) as f64) {
            return None;
        }
        let nx = x as isize + offset[0].round() as isize;
        let ny = y as isize + offset[1].round() as isize;
        let nl = layer as isize + offset[2].round() as isize;
        if nl < 1 || nl > s as isize || nx < BORDER as isize || ny < BORDER as isize {
            return None;
        }
        if nx >= (w - BORDER) as isize || ny >= (h - BORDER) as isize {
            return None;
        }
        (x, y, layer) = (nx as usize, ny as usize, nl as usize);
    }
    None
}

fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-18 {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, slot) in out.iter_mut().enumerate() {
        let mut m = *a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        let d = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        *slot = d / det;
    }
    Some(out)
}

#[inline]
fn gradient(p: &Plane, x: usize, y: usize) -> (f64, f64) {
    (p.at(x + 1, y) - p.at(x - 1, y), p.at(x, y + 1) - p.at(x, y - 1))
}

fn wrap_angle(a: f64) -> f64 {
    let t = a.rem_euclid(2.0 * PI);
    if t >= 2.0 * PI {
        0.0
    } else {
        t
    }
}

fn dominant_orientations(img: &Plane, x: usize, y: usize, sigma: f64) -> Vec<f64> {
    let weight_sigma = 1.5 * sigma;
    let radius = (3.0 * weight_sigma).round() as isize;
    let denom = 2.0 * weight_sigma * weight_sigma;
    let mut hist = [0.0f64; ORI_BINS];
    for dy in -radius..=radius {
        let yy = y as isize + dy;
        if yy <= 0 || yy >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let xx = x as isize + dx;
            if xx <= 0 || xx >= img.w as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, xx as usize, yy as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let w = (-((dx * dx + dy * dy) as f64) / denom).exp();
            let bin = (wrap_angle(gy.atan2(gx)) * ORI_BINS as f64 / (2.0 * PI)).round() as usize % ORI_BINS;
            hist[bin] += w * mag;
        }
    }
    let n = ORI_BINS;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            (hist[(i + n - 2) % n] + hist[(i + 2) % n]) / 16.0
                + (hist[(i + n - 1) % n] + hist[(i + 1) % n]) * 4.0 / 16.0
                + hist[i] * 6.0 / 16.0
        })
        .collect();
    let max = smooth.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let (l, c, r) = (smooth[(i + n - 1) % n], smooth[i], smooth[(i + 1) % n]);
        if c > l && c > r && c >= 0.8 * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            out.push(wrap_angle((i as f64 + shift) * 2.0 * PI / n as f64));
        }
    }
    out
}

fn describe(oct: &Octave, ext: &Extremum, config: &DetectorConfig) -> Vec<Keypoint> {
    let s = config.intervals as f64;
    let layer = (ext.layer.round() as usize).clamp(1, config.intervals);
    let img = &oct.gauss[layer];
    let octave_sigma = config.base_sigma * 2f64.powf(ext.layer / s);
    let (px, py) = (ext.x.round() as usize, ext.y.round() as usize);
    let scale_up = 2f64.powi(oct.index as i32);
    dominant_orientations(img, px, py, octave_sigma)
        .into_iter()
        .filter_map(|angle| {
            let descriptor = descriptor(img, px, py, angle, octave_sigma)?;
            Some(Keypoint {
                x: ext.x * scale_up,
                y: ext.y * scale_up,
                scale: octave_sigma * scale_up,
                orientation: angle,
                response: ext.response,
                descriptor,
            })
        })
        .collect()
}

fn descriptor(img: &Plane, x: usize, y: usize, angle: f64, sigma: f64) -> Option<[f32; DESCRIPTOR_LEN]> {
    let d = DESC_GRID as f64;
    let nb = DESC_BINS;
    let hist_width = 3.0 * sigma;
    let radius = ((hist_width * std::f64::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize)
        .min(((img.w * img.w + img.h * img.h) as f64).sqrt() as isize);
    let (sin_t, cos_t) = angle.sin_cos();
    let weight_denom = 2.0 * (0.5 * d) * (0.5 * d);
    // padded histogram so trilinear spill at the edges needs no bounds checks
    let stride_r = (DESC_GRID + 2) * (nb + 2);
    let stride_c = nb + 2;
    let mut hist = vec![0.0f64; (DESC_GRID + 2) * stride_r];

    for dy in -radius..=radius {
        let yy = y as isize + dy;
        if yy <= 0 || yy >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let xx = x as isize + dx;
            if xx <= 0 || xx >= img.w as isize - 1 {
                continue;
            }
            // offset expressed in the keypoint's rotated frame, in bin units
            let c_rot = (dx as f64 * cos_t + dy as f64 * sin_t) / hist_width;
            let r_rot = (-(dx as f64) * sin_t + dy as f64 * cos_t) / hist_width;
            let rbin = r_rot + d / 2.0 - 0.5;
            let cbin = c_rot + d / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d || cbin <= -1.0 || cbin >= d {
                continue;
            }
            let (gx, gy) = gradient(img, xx as usize, yy as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let weight = (-(c_rot * c_rot + r_rot * r_rot) / weight_denom).exp();
            let obin = wrap_angle(gy.atan2(gx) - angle) * nb as f64 / (2.0 * PI);

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let v = mag * weight;
            for (ri, wr) in [(0usize, 1.0 - fr), (1, fr)] {
                let row = (r0 as isize + 1 + ri as isize) as usize;
                for (ci, wc) in [(0usize, 1.0 - fc), (1, fc)] {
                    let col = (c0 as isize + 1 + ci as isize) as usize;
                    for (oi, wo) in [(0usize, 1.0 - fo), (1, fo)] {
                        let ob = (o0 as usize + oi) % nb;
                        hist[row * stride_r + col * stride_c + ob] += v * wr * wc * wo;
                    }
                }
            }
        }
    }

    let mut desc = [0.0f64; DESCRIPTOR_LEN];
    for r in 0..DESC_GRID {
        for c in 0..DESC_GRID {
            for o in 0..nb {
                desc[(r * DESC_GRID + c) * nb + o] = hist[(r + 1) * stride_r + (c + 1) * stride_c + o];
            }
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return None;
    }
    let clip = 0.2 * norm;
    for v in desc.iter_mut() {
        *v = v.min(clip);
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = [0.0f32; DESCRIPTOR_LEN];
    for (o, v) in out.iter_mut().zip(desc) {
        *o = (v / norm) as f32;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BandKind;

    fn blob(size: usize, cx: f64, cy: f64, sigma: f64) -> Band {
        Band::from_fn(BandKind::Nir, size, size, |x, y| {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (0.1 + 0.8 * (-r2 / (2.0 * sigma * sigma)).exp()) as f32
        })
        .unwrap()
    }

    #[test]
    fn uniform_band_has_no_keypoints() {
        let b = Band::constant(BandKind::Red, 64, 64, 0.4).unwrap();
        assert!(detect_keypoints(&b, &DetectorConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn small_band_rejected() {
        let b = Band::constant(BandKind::Red, 31, 64, 0.4).unwrap();
        assert!(matches!(
            detect_keypoints(&b, &DetectorConfig::default()),
            Err(RegistrationError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn gaussian_blob_is_localized() {
        let (cx, cy) = (40.3, 37.6);
        let kps = detect_keypoints(&blob(80, cx, cy, 3.0), &DetectorConfig::default()).unwrap();
        assert!(!kps.is_empty());
        let best = kps.iter().map(|k| ((k.x - cx).powi(2) + (k.y - cy).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        assert!(best < 2.0, "closest keypoint {best:.2} px from blob center");
    }

    #[test]
    fn rotation_by_ninety_degrees_moves_keypoints_with_the_image() {
        // odd side lengths keep every octave's subsampling grid rotation-aligned
        let n = 129usize;
        let src = crate::registration::tests::texture(n, 17);
        let rotated = Band::from_fn(BandKind::Nir, n, n, |x, y| src.get(n - 1 - y, x)).unwrap();
        let ka = detect_keypoints(&src, &DetectorConfig::default()).unwrap();
        let kb = detect_keypoints(&rotated, &DetectorConfig::default()).unwrap();
        assert!(ka.len() >= 10);
        let ratio = kb.len() as f64 / ka.len() as f64;
        assert!((0.8..=1.2).contains(&ratio), "{} vs {}", ka.len(), kb.len());
        let mapped = ka
            .iter()
            .filter(|k| {
                let (ex, ey) = (k.y, (n - 1) as f64 - k.x);
                kb.iter().any(|q| (q.x - ex).hypot(q.y - ey) < 2.0)
            })
            .count();
        assert!(mapped as f64 >= 0.9 * ka.len() as f64, "{mapped} of {} mapped", ka.len());
    }

    #[test]
    fn descriptors_are_unit_length_and_scale_invariant() {
        let mut img = Vec::new();
        for y in 0..96usize {
            for x in 0..96usize {
                let (fx, fy) = (x as f64, y as f64);
                img.push((0.5 + 0.2 * (fx / 7.0).sin() * (fy / 9.0).cos() + 0.1 * ((fx + fy) / 5.0).sin()) as f32);
            }
        }
        let a = Band::new(BandKind::Red, 96, 96, img.clone()).unwrap();
        let b = Band::new(BandKind::Red, 96, 96, img.iter().map(|v| 2.0 * v).collect()).unwrap();
        let ka = detect_keypoints(&a, &DetectorConfig::default()).unwrap();
        let kb = detect_keypoints(&b, &DetectorConfig::default()).unwrap();
        assert!(!ka.is_empty());
        assert_eq!(ka.len(), kb.len());
        for (p, q) in ka.iter().zip(&kb) {
            let norm: f64 = p.descriptor.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            for (u, v) in p.descriptor.iter().zip(&q.descriptor) {
                assert!((u - v).abs() < 1e-4);
            }
        }
    }
}
