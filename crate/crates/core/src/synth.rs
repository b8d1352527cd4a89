//! Deterministic synthetic corpus standing in for real imagery.
//!
//! Two smooth hidden fields `U` and `V` (sums of random plane waves) drive
//! every sensor. The deforestation mask is `0.7 U + 0.3 V + noise > 0`;
//! Sentinel-2 B8 carries `U` and B4 carries `V`, Landsat-8 carries both at
//! 30 m, and Sentinel-1 sees them through heavy speckle. Sentinel-2 and
//! Landsat scenes have cloud blobs flagged in their QA bands.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{tsrf, GeoBox, Raster, Satellite};
use crate::seed;
use crate::stacker::{store::SPEC_FILE, StackSpec};

pub const MANIFEST_FILE: &str = "synth.json";
const WEST: f64 = -55.2;
const NORTH: f64 = -3.33;
const WAVES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_tiles: usize,
    pub tile_size: usize,
    pub target_date: NaiveDate,
    /// Std of the per-pixel noise added before thresholding the mask.
    pub mask_noise: f64,
    /// Std of sensor noise, in units of the hidden fields.
    pub band_noise: f64,
    /// Approximate cloud-covered fraction of each optical scene.
    pub cloud_cover: f64,
    /// Shortest and longest plane-wave wavelength, in 10 m pixels.
    pub wavelength_px: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_tiles: 200,
            tile_size: 64,
            target_date: NaiveDate::from_ymd_opt(2019, 8, 15).unwrap(),
            mask_noise: 0.03,
            band_noise: 0.05,
            cloud_cover: 0.1,
            wavelength_px: (24.0, 72.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(format!("synth: {m}")));
        if self.n_tiles == 0 {
            return bad("n_tiles must be >= 1");
        }
        if self.tile_size == 0 {
            return bad("tile_size must be >= 1");
        }
        if !(self.mask_noise >= 0.0 && self.band_noise >= 0.0) {
            return bad("noise levels must be >= 0");
        }
        if !(0.0..1.0).contains(&self.cloud_cover) {
            return bad("cloud_cover must lie in [0, 1)");
        }
        let (lo, hi) = self.wavelength_px;
        if !(lo > 0.0 && lo <= hi) {
            return bad("need 0 < min wavelength <= max wavelength");
        }
        Ok(())
    }

    /// Tile grid: `ceil(sqrt(n))` columns, as many rows as needed.
    pub fn grid(&self) -> (usize, usize) {
        let cols = (self.n_tiles as f64).sqrt().ceil() as usize;
        (cols, self.n_tiles.div_ceil(cols))
    }

    /// The 10 m grid covering every tile slot.
    pub fn region(&self) -> Result<GeoBox> {
        let (cols, rows) = self.grid();
        GeoBox::from_origin(
            WEST,
            NORTH,
            Satellite::DeforestationMask.pixel_size_deg(),
            cols * self.tile_size,
            rows * self.tile_size,
        )
    }
}

/// Smooth zero-mean, unit-variance random field.
struct Field {
    waves: Vec<(f64, f64, f64)>,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> Field {
        let waves = (0..WAVES)
            .map(|_| {
                let lambda = rng.random_range(lo..=hi);
                let theta = rng.random_range(0.0..2.0 * PI);
                let k = 2.0 * PI / lambda;
                (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Field { waves }
    }

    /// Value at a position measured in 10 m pixels from the region origin.
    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|(kx, ky, p)| (kx * x + ky * y + p).cos()).sum();
        s * (2.0 / WAVES as f64).sqrt()
    }
}

struct World {
    u: Field,
    v: Field,
    cfg: SynthConfig,
}

fn tag(parts: &[&str]) -> Vec<u64> {
    parts.iter().map(|p| seed::hash_str(p)).collect()
}

impl World {
    fn new(cfg: &SynthConfig) -> World {
        let mut rng = seed::rng(cfg.seed, &tag(&["fields"]));
        World {
            u: Field::new(&mut rng, cfg.wavelength_px),
            v: Field::new(&mut rng, cfg.wavelength_px),
            cfg: cfg.clone(),
        }
    }

    /// Row-seeded standard normals, so rows can be generated in parallel.
    fn noise_row(&self, what: &str, row: usize, n: usize) -> Vec<f64> {
        let mut rng = seed::rng(self.cfg.seed, &[seed::hash_str(what), row as u64]);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn mask_value(&self, x: f64, y: f64, noise: f64) -> f32 {
        let z = 0.7 * self.u.at(x, y) + 0.3 * self.v.at(x, y) + self.cfg.mask_noise * noise;
        if z > 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Mask over `g` (10 m grid at the region origin); slots past `n_tiles` are NaN.
    fn mask(&self, g: &GeoBox) -> Vec<f32> {
        let (cols, _) = self.cfg.grid();
        let ts = self.cfg.tile_size;
        let mut out = vec![0f32; g.pixel_count()];
        out.par_chunks_mut(g.width).enumerate().for_each(|(row, line)| {
            let noise = self.noise_row("mask", row, g.width);
            for (col, v) in line.iter_mut().enumerate() {
                let slot = (row / ts) * cols + col / ts;
                *v = if slot < self.cfg.n_tiles {
                    self.mask_value(col as f64 + 0.5, row as f64 + 0.5, noise[col])
                } else {
                    f32::NAN
                };
            }
        });
        out
    }

    /// Cloud blobs: a thresholded smooth field unique to one scene.
    fn clouds(&self, scene: &str, g: &GeoBox, scale: f64) -> Vec<bool> {
        let mut rng = seed::rng(self.cfg.seed, &tag(&["clouds", scene]));
        let (lo, hi) = self.cfg.wavelength_px;
        let f = Field::new(&mut rng, (lo * 1.5, hi * 1.5));
        // cover ~ P(N(0,1) > t)
        let t = inverse_normal_tail(self.cfg.cloud_cover);
        (0..g.pixel_count())
            .map(|i| {
                let (col, row) = ((i % g.width) as f64 + 0.5, (i / g.width) as f64 + 0.5);
                self.cfg.cloud_cover > 0.0 && f.at(col * scale, row * scale) > t
            })
            .collect()
    }

    /// Bands of one scene, each `offset + gain * (w_u U + w_v V + noise)`;
    /// `scale` is the pixel size relative to 10 m.
    fn bands(&self, scene: &str, g: &GeoBox, scale: f64, recipes: &[(f64, f64, f64, f64, f64)]) -> Vec<f32> {
        let n = g.pixel_count();
        let mut out = vec![0f32; recipes.len() * n];
        for (bi, &(offset, gain, wu, wv, noise_mult)) in recipes.iter().enumerate() {
            let block = &mut out[bi * n..(bi + 1) * n];
            block.par_chunks_mut(g.width).enumerate().for_each(|(row, line)| {
                let noise = self.noise_row(&format!("{scene}/{bi}"), row, g.width);
                for (col, v) in line.iter_mut().enumerate() {
                    let (x, y) = ((col as f64 + 0.5) * scale, (row as f64 + 0.5) * scale);
                    let signal = wu * self.u.at(x, y) + wv * self.v.at(x, y);
                    let value = offset + gain * (signal + noise_mult * self.cfg.band_noise * noise[col]);
                    *v = value as f32;
                }
            });
        }
        out
    }
}

/// `t` with `P(Z > t) = p` for standard normal `Z`, by bisection on erfc.
fn inverse_normal_tail(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::INFINITY;
    }
    let tail = |t: f64| 0.5 * erfc(t / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Complementary error function (Numerical Recipes `erfcc`, |error| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub region: GeoBox,
    pub files: Vec<PathBuf>,
}

/// Landsat-8 grid: 30 m pixels from the same origin, covering the region.
fn landsat_grid(region: &GeoBox) -> Result<GeoBox> {
    let px = Satellite::Landsat8.pixel_size_deg();
    let ratio = (Satellite::Landsat8.pixel_size_m() / Satellite::Sentinel2.pixel_size_m()) as usize;
    GeoBox::from_origin(
        region.west,
        region.north,
        px,
        region.width.div_ceil(ratio),
        region.height.div_ceil(ratio),
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(format!("encode {}", path.display()), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Writes the corpus under `root`: `scenes/<satellite>/<date>.tsrf` with
/// sidecars, the stack spec the corpus is designed for, and a manifest.
pub fn generate(root: &Path, cfg: &SynthConfig) -> Result<SynthManifest> {
    cfg.validate()?;
    let world = World::new(cfg);
    let region = cfg.region()?;
    let l8 = landsat_grid(&region)?;
    let t = cfg.target_date;
    let shift = |days: i64| t + chrono::Duration::days(days);
    let mut files = Vec::new();
    let mut write = |sat: Satellite, d: NaiveDate, raster: Raster| -> Result<()> {
        let rel = PathBuf::from("scenes").join(sat.name()).join(format!("{}.tsrf", d.format("%Y-%m-%d")));
        tsrf::write(&root.join(&rel), &raster)?;
        files.push(rel);
        Ok(())
    };

    let mask = world.mask(&region);
    write(
        Satellite::DeforestationMask,
        t,
        Raster::new(Satellite::DeforestationMask, t, region, vec!["Deforestation".into()], mask)?,
    )?;

    // Sentinel-1: backscatter in dB, weak signal under strong speckle.
    for d in [shift(-43), shift(-7), shift(17)] {
        let name = format!("S1/{d}");
        let data = world.bands(&name, &region, 1.0, &[(-12.0, 1.5, 0.8, 0.2, 8.0), (-19.0, 1.5, 0.2, 0.8, 8.0)]);
        write(Satellite::Sentinel1, d, Raster::new(Satellite::Sentinel1, d, region, vec!["VV".into(), "VH".into()], data)?)?;
    }

    // Sentinel-2: B8 ~ U, B4 ~ V; the last date falls outside the +/-2 month window.
    let s2_bands = ["B2", "B3", "B4", "B8", "QA60"];
    for d in [shift(-56), shift(-21), shift(4), shift(107)] {
        let name = format!("S2/{d}");
        let mut data = world.bands(
            &name,
            &region,
            1.0,
            &[
                (0.05, 0.01, 0.0, 0.7, 1.0),
                (0.08, 0.015, 0.2, 0.6, 1.0),
                (0.07, 0.03, 0.0, 1.0, 1.0),
                (0.30, 0.08, 1.0, 0.0, 1.0),
            ],
        );
        let n = region.pixel_count();
        let clouds = world.clouds(&name, &region, 1.0);
        for (i, &c) in clouds.iter().enumerate() {
            if c {
                for b in 0..4 {
                    data[b * n + i] = 0.6;
                }
            }
        }
        data.extend(clouds.iter().map(|&c| if c { 1024.0 } else { 0.0 }));
        let bands = s2_bands.iter().map(|b| b.to_string()).collect();
        write(Satellite::Sentinel2, d, Raster::new(Satellite::Sentinel2, d, region, bands, data)?)?;
    }

    // Landsat-8 at 30 m: SR_B4 ~ V, SR_B5 ~ U, clouds flagged by QA_PIXEL bit 3.
    let d = shift(-10);
    let name = format!("L8/{d}");
    let mut data = world.bands(&name, &l8, 3.0, &[(0.07, 0.03, 0.0, 1.0, 1.0), (0.28, 0.08, 1.0, 0.0, 1.0)]);
    let n = l8.pixel_count();
    let clouds = world.clouds(&name, &l8, 3.0);
    for (i, &c) in clouds.iter().enumerate() {
        if c {
            data[i] = 0.5;
            data[n + i] = 0.5;
        }
    }
    data.extend(clouds.iter().map(|&c| if c { 8.0 } else { 0.0 }));
    let bands = ["SR_B4", "SR_B5", "QA_PIXEL"].iter().map(|b| b.to_string()).collect();
    write(Satellite::Landsat8, d, Raster::new(Satellite::Landsat8, d, l8, bands, data)?)?;

    let mut spec = StackSpec::desk();
    spec.tile_size = cfg.tile_size;
    write_json(&root.join(SPEC_FILE), &spec)?;
    let manifest = SynthManifest {
        config: cfg.clone(),
        region,
        files,
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Ground-truth mask of tile slot `index` without touching disk.
pub fn tile_mask(cfg: &SynthConfig, index: usize) -> Result<Vec<u8>> {
    cfg.validate()?;
    let world = World::new(cfg);
    let (cols, _) = cfg.grid();
    let ts = cfg.tile_size;
    let (r0, c0) = ((index / cols) * ts, (index % cols) * ts);
    let mut out = Vec::with_capacity(ts * ts);
    for row in r0..r0 + ts {
        let noise = world.noise_row("mask", row, cols * ts);
        for col in c0..c0 + ts {
            out.push(world.mask_value(col as f64 + 0.5, row as f64 + 0.5, noise[col]) as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let cfg = SynthConfig {
            n_tiles: 200,
            ..Default::default()
        };
        assert_eq!(cfg.grid(), (15, 14));
        let one = SynthConfig {
            n_tiles: 1,
            ..Default::default()
        };
        assert_eq!(one.grid(), (1, 1));
    }

    #[test]
    fn erfc_and_tail() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_207).abs() < 1e-6);
        assert!((inverse_normal_tail(0.5)).abs() < 1e-6);
        assert!((inverse_normal_tail(0.1) - 1.281_551_6).abs() < 1e-5);
    }

    #[test]
    fn field_is_roughly_standardized() {
        let cfg = SynthConfig::default();
        let w = World::new(&cfg);
        let vals: Vec<f64> = (0..20_000).map(|i| w.u.at((i % 200) as f64 * 7.3, (i / 200) as f64 * 5.1)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.2 && (var - 1.0).abs() < 0.3, "mean {mean} var {var}");
    }
}
