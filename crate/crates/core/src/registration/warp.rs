use rayon::prelude::*;

use super::affine::AffineTransform;
use super::RegistrationError;
use crate::raster::Band;

/// Resamples `band` into a `width × height` frame where `transform` maps
/// source pixel coordinates to target coordinates.
///
/// Each target pixel is pulled from the source through the inverse map with
/// bilinear interpolation. A sample that puts nonzero weight on an invalid
/// or out-of-bounds source pixel is marked invalid.
pub fn warp_band(
    band: &Band,
    transform: &AffineTransform,
    width: usize,
    height: usize,
) -> Result<Band, RegistrationError> {
    let inv = transform.inverse()?;
    let (sw, sh) = (band.width() as isize, band.height() as isize);
    let values = band.values();
    let valid = band.valid();

    let rows: Vec<(Vec<f32>, Vec<bool>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut out_v = vec![0.0f32; width];
            let mut out_m = vec![false; width];
            for x in 0..width {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                if let Some(v) = sample_bilinear(values, valid, sw, sh, sx, sy) {
                    out_v[x] = v;
                    out_m[x] = true;
                }
            }
            (out_v, out_m)
        })
        .collect();

    let mut out_values = Vec::with_capacity(width * height);
    let mut out_valid = Vec::with_capacity(width * height);
    for (v, m) in rows {
        out_values.extend(v);
        out_valid.extend(m);
    }
    Ok(Band::with_mask(band.kind(), width, height, out_values, out_valid)?)
}

/// Snaps coordinates within this distance of an integer onto it, so exact
/// integer maps (identity, integer shifts) never touch a zero-weight
/// neighbour through rounding noise.
const SNAP: f64 = 1e-9;

fn sample_bilinear(values: &[f32], valid: &[bool], w: isize, h: isize, sx: f64, sy: f64) -> Option<f32> {
    if !sx.is_finite() || !sy.is_finite() {
        return None;
    }
    let snap = |v: f64| if (v - v.round()).abs() < SNAP { v.round() } else { v };
    let (sx, sy) = (snap(sx), snap(sy));
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut acc = 0.0f64;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let (px, py) = (x0 + dx, y0 + dy);
            if px < 0 || py < 0 || px >= w || py >= h {
                return None;
            }
            let i = (py * w + px) as usize;
            if !valid[i] {
                return None;
            }
            acc += wx * wy * values[i] as f64;
        }
    }
    Some(acc as f32)
}
