use serde::{Deserialize, Serialize};

use super::{GeoBox, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resampling {
    Nearest,
    #[default]
    Bilinear,
}

/// Cut `g` out of `r` on the same pixel grid. Pixels of `g` outside `r` are nodata.
pub fn crop_window(r: &Raster, g: &GeoBox) -> Result<Raster> {
    g.validate()?;
    let src = r.geobox();
    if !src.same_pixel_size(g) {
        return Err(Error::GridMismatch {
            source_px: (src.pixel_size_x(), src.pixel_size_y()),
            target_px: (g.pixel_size_x(), g.pixel_size_y()),
        });
    }
    if !src.intersects(g) {
        return Err(Error::NoOverlap);
    }
    let cols: Vec<Option<usize>> = (0..g.width)
        .map(|c| containing_index(src.to_pixel(g.pixel_center(c, 0).0, src.north).0, src.width))
        .collect();
    let rows: Vec<Option<usize>> = (0..g.height)
        .map(|r| containing_index(src.to_pixel(src.west, g.pixel_center(0, r).1).1, src.height))
        .collect();
    let bands: Vec<usize> = (0..r.band_count()).collect();
    Ok(r.with_grid(*g, gather(r, &bands, g, &cols, &rows)))
}

/// Resample `r` onto `target`. Target pixels whose centers fall outside the
/// source footprint are nodata.
pub fn resample(r: &Raster, target: &GeoBox, method: Resampling) -> Result<Raster> {
    let bands: Vec<usize> = (0..r.band_count()).collect();
    Ok(r.with_grid(*target, resample_bands(r, &bands, target, method)?))
}

/// Resamples only the listed bands, returning them band-major on `target`.
pub(crate) fn resample_bands(
    r: &Raster,
    bands: &[usize],
    target: &GeoBox,
    method: Resampling,
) -> Result<Vec<f32>> {
    target.validate()?;
    let src = r.geobox();
    if !src.intersects(target) {
        return Err(Error::NoOverlap);
    }
    let xs: Vec<f64> = (0..target.width)
        .map(|c| src.to_pixel(target.pixel_center(c, 0).0, src.north).0)
        .collect();
    let ys: Vec<f64> = (0..target.height)
        .map(|row| src.to_pixel(src.west, target.pixel_center(0, row).1).1)
        .collect();
    Ok(match method {
        Resampling::Nearest => {
            let cols: Vec<_> = xs.iter().map(|&x| containing_index(x, src.width)).collect();
            let rows: Vec<_> = ys.iter().map(|&y| containing_index(y, src.height)).collect();
            gather(r, bands, target, &cols, &rows)
        }
        Resampling::Bilinear => bilinear(r, bands, target, &xs, &ys),
    })
}

/// Index of the source pixel containing fractional coordinate `v`, i.e. the
/// one whose center is nearest.
fn containing_index(v: f64, n: usize) -> Option<usize> {
    if v >= 0.0 && v < n as f64 {
        Some((v.floor() as usize).min(n - 1))
    } else {
        None
    }
}

fn gather(
    r: &Raster,
    bands: &[usize],
    g: &GeoBox,
    cols: &[Option<usize>],
    rows: &[Option<usize>],
) -> Vec<f32> {
    let src = r.geobox();
    let mut out = vec![f32::NAN; bands.len() * g.pixel_count()];
    for (&b, dst) in bands.iter().zip(out.chunks_mut(g.pixel_count())) {
        let band = r.band(b);
        for (row, dst_row) in rows.iter().zip(dst.chunks_mut(g.width)) {
            let Some(sr) = row else { continue };
            let src_row = &band[sr * src.width..(sr + 1) * src.width];
            for (col, v) in cols.iter().zip(dst_row.iter_mut()) {
                if let Some(sc) = col {
                    *v = src_row[*sc];
                }
            }
        }
    }
    out
}

/// Lower neighbour index and weight of the upper neighbour for a source
/// coordinate, clamped so edge pixels replicate outward.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    t: f64,
}

fn tap(v: f64, n: usize) -> Option<Tap> {
    if !(v >= 0.0 && v < n as f64) {
        return None;
    }
    let f = v - 0.5;
    let lo = f.floor();
    if lo < 0.0 {
        return Some(Tap { lo: 0, t: 0.0 });
    }
    let lo_i = lo as usize;
    if lo_i >= n - 1 {
        return Some(Tap { lo: n - 1, t: 0.0 });
    }
    Some(Tap { lo: lo_i, t: f - lo })
}

fn bilinear(r: &Raster, bands: &[usize], g: &GeoBox, xs: &[f64], ys: &[f64]) -> Vec<f32> {
    let src = r.geobox();
    let xt: Vec<_> = xs.iter().map(|&x| tap(x, src.width)).collect();
    let yt: Vec<_> = ys.iter().map(|&y| tap(y, src.height)).collect();
    let mut out = vec![f32::NAN; bands.len() * g.pixel_count()];
    for (&b, dst) in bands.iter().zip(out.chunks_mut(g.pixel_count())) {
        let band = r.band(b);
        let at = |row: usize, col: usize| band[row * src.width + col] as f64;
        for (ty, dst_row) in yt.iter().zip(dst.chunks_mut(g.width)) {
            let Some(ty) = ty else { continue };
            for (tx, v) in xt.iter().zip(dst_row.iter_mut()) {
                let Some(tx) = tx else { continue };
                *v = interpolate(&at, *tx, *ty);
            }
        }
    }
    out
}

fn interpolate(at: &impl Fn(usize, usize) -> f64, tx: Tap, ty: Tap) -> f32 {
    let x1 = if tx.t > 0.0 { tx.lo + 1 } else { tx.lo };
    let y1 = if ty.t > 0.0 { ty.lo + 1 } else { ty.lo };
    let v00 = at(ty.lo, tx.lo);
    let v01 = at(ty.lo, x1);
    let v10 = at(y1, tx.lo);
    let v11 = at(y1, x1);
    // Zero-weight neighbours alias the lower tap, so any NaN here is a real contributor.
    let corners = [v00, v01, v10, v11];
    if corners.iter().any(|v| v.is_nan()) {
        return f32::NAN;
    }
    let top = v00 + (v01 - v00) * tx.t;
    let bottom = v10 + (v11 - v10) * tx.t;
    let v = top + (bottom - top) * ty.t;
    let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.clamp(lo, hi) as f32
}
