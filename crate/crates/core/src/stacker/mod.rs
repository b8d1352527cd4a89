//! Assembles catalog scenes into fixed-layout N-channel tile samples.
//!
//! Channel order is a pure function of the [`StackSpec`]: satellites in enum
//! order, then date slots oldest to newest, then bands in sensor-table order.

mod augment;
mod normalize;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{month_index, Catalog, SceneRecord, TemporalWindow};
use crate::error::{Error, Result};
use crate::raster::{resample_bands, tsrf, usable_pixels, GeoBox, Raster, Resampling, Satellite};

pub use augment::{dihedral, satellite_dropout, Dihedral};
pub use normalize::{compute_stats, normalize, normalize_with, ChannelStats};

/// Target pixel that contributes nothing to loss or metrics.
pub const IGNORE: u8 = 255;
pub const DEFAULT_FILL: f32 = -9999.0;
pub const LAND_MASK_BAND: &str = "LandMask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatelliteSlots {
    pub satellite: Satellite,
    pub bands: Vec<String>,
    pub max_dates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub satellites: Vec<SatelliteSlots>,
    #[serde(default = "default_fill")]
    pub fill: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<Vec<ChannelStats>>,
    pub tile_size: usize,
    /// Interpolation for continuous bands; categorical bands always use nearest.
    #[serde(default)]
    pub resampling: Resampling,
    pub target: Satellite,
}

fn default_fill() -> f32 {
    DEFAULT_FILL
}

/// Channels belonging to one (satellite, date slot) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayout {
    pub satellite: Satellite,
    pub slot: usize,
    pub channel_start: usize,
    pub channel_count: usize,
}

impl StackSpec {
    /// Copy with satellites in enum order and bands in sensor-table order.
    pub fn canonical(&self) -> StackSpec {
        let mut spec = self.clone();
        spec.satellites.sort_by_key(|s| s.satellite);
        for s in &mut spec.satellites {
            let sat = s.satellite;
            if sat != Satellite::Synthetic {
                s.bands.sort_by_key(|b| sat.band_index(b).unwrap_or(usize::MAX));
            }
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.tile_size == 0 {
            return bad("tile_size must be >= 1".into());
        }
        if !self.fill.is_finite() {
            return bad("fill must be finite".into());
        }
        for (i, s) in self.satellites.iter().enumerate() {
            if self.satellites[..i].iter().any(|o| o.satellite == s.satellite) {
                return bad(format!("{} listed twice", s.satellite));
            }
            if s.max_dates == 0 || s.bands.is_empty() {
                return bad(format!("{} needs >= 1 band and >= 1 date slot", s.satellite));
            }
            for (j, b) in s.bands.iter().enumerate() {
                if s.bands[..j].contains(b) {
                    return bad(format!("{} band `{b}` listed twice", s.satellite));
                }
                if s.satellite != Satellite::Synthetic && s.satellite.band_index(b).is_none() {
                    return bad(format!("`{b}` is not a {} band", s.satellite));
                }
            }
        }
        let n = self.channel_count();
        if n == 0 {
            return bad("stack has no channels".into());
        }
        if let Some(stats) = &self.stats {
            if stats.len() != n {
                return Err(Error::MissingStats {
                    have: stats.len(),
                    need: n,
                });
            }
            if let Some(i) = stats.iter().position(|s| !(s.std > 0.0) || !s.mean.is_finite()) {
                return bad(format!("channel {i} has invalid stats {:?}", stats[i]));
            }
        }
        Ok(())
    }

    /// N = sum over satellites of bands x date slots.
    pub fn channel_count(&self) -> usize {
        self.satellites.iter().map(|s| s.bands.len() * s.max_dates).sum()
    }

    pub fn layout(&self) -> Vec<SlotLayout> {
        let spec = self.canonical();
        let mut out = Vec::new();
        let mut start = 0;
        for s in &spec.satellites {
            for slot in 0..s.max_dates {
                out.push(SlotLayout {
                    satellite: s.satellite,
                    slot,
                    channel_start: start,
                    channel_count: s.bands.len(),
                });
                start += s.bands.len();
            }
        }
        out
    }

    pub fn channel_names(&self) -> Vec<String> {
        let spec = self.canonical();
        let mut out = Vec::new();
        for s in &spec.satellites {
            for slot in 0..s.max_dates {
                for b in &s.bands {
                    out.push(format!("{}/t{slot}/{b}", s.satellite));
                }
            }
        }
        out
    }

    /// Desk-scale layout produced by the synthetic corpus: 16 channels.
    pub fn desk() -> StackSpec {
        let slots = |satellite, bands: &[&str], max_dates| SatelliteSlots {
            satellite,
            bands: bands.iter().map(|b| b.to_string()).collect(),
            max_dates,
        };
        StackSpec {
            satellites: vec![
                slots(Satellite::Sentinel1, &["VV", "VH"], 2),
                slots(Satellite::Sentinel2, &["B2", "B3", "B4", "B8"], 2),
                slots(Satellite::Landsat8, &["SR_B4", "SR_B5"], 2),
            ],
            fill: DEFAULT_FILL,
            stats: None,
            tile_size: 64,
            resampling: Resampling::Bilinear,
            target: Satellite::DeforestationMask,
        }
    }

    /// Full-band deforestation stack over Sentinel-1/2 and Landsat-8 (N = 92).
    pub fn deforestation_full_scale() -> StackSpec {
        let non_qa = |sat: Satellite| -> Vec<String> {
            let qa = sat.default_qa().map(|q| q.band);
            sat.bands()
                .iter()
                .filter(|b| Some(b.to_string()) != qa)
                .map(|b| b.to_string())
                .collect()
        };
        StackSpec {
            satellites: vec![
                SatelliteSlots {
                    satellite: Satellite::Sentinel1,
                    bands: non_qa(Satellite::Sentinel1),
                    max_dates: 8,
                },
                SatelliteSlots {
                    satellite: Satellite::Sentinel2,
                    bands: non_qa(Satellite::Sentinel2),
                    max_dates: 4,
                },
                SatelliteSlots {
                    satellite: Satellite::Landsat8,
                    bands: non_qa(Satellite::Landsat8),
                    max_dates: 4,
                },
            ],
            fill: DEFAULT_FILL,
            stats: None,
            tile_size: 64,
            resampling: Resampling::Bilinear,
            target: Satellite::DeforestationMask,
        }
    }

    /// Fire stack over the 8-day/16-day products and FIRMS (N = 108), 256 px tiles.
    pub fn fire_full_scale() -> StackSpec {
        let all = |sat: Satellite, max_dates| SatelliteSlots {
            satellite: sat,
            bands: sat.bands().iter().map(|b| b.to_string()).collect(),
            max_dates,
        };
        StackSpec {
            satellites: vec![
                all(Satellite::Vnp09h1, 12),
                all(Satellite::Vnp13a1, 8),
                all(Satellite::Mcd15a2h, 12),
                all(Satellite::Firms, 8),
            ],
            fill: DEFAULT_FILL,
            stats: None,
            tile_size: 256,
            resampling: Resampling::Bilinear,
            target: Satellite::FireCCI,
        }
    }
}

/// One training example: C x H x W channel stack plus H x W target.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSample {
    pub id: String,
    pub input: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// 0, 1 or [`IGNORE`].
    pub target: Vec<u8>,
    pub geobox: GeoBox,
    pub target_date: NaiveDate,
    pub present: Vec<bool>,
    pub layout: Vec<SlotLayout>,
    /// Value that marks missing data in `input`.
    pub fill: f32,
}

impl TileSample {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.input[c * n..(c + 1) * n]
    }

    pub fn present_slots(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }

    pub fn ignore_mask(&self) -> Vec<bool> {
        self.target.iter().map(|&t| t == IGNORE).collect()
    }

    pub fn has_positive(&self) -> bool {
        self.target.contains(&1)
    }
}

/// Loads scenes once and keeps cloud-screened copies in memory.
#[derive(Default)]
pub struct SceneCache {
    scenes: Mutex<HashMap<PathBuf, Arc<Raster>>>,
}

impl SceneCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// The scene with cloud-flagged pixels set to nodata. Scenes that lack
    /// their QA band are used unscreened.
    pub fn get(&self, rec: &SceneRecord) -> Result<Arc<Raster>> {
        if let Some(r) = self.scenes.lock().unwrap().get(&rec.path) {
            return Ok(Arc::clone(r));
        }
        let raster = tsrf::read(&rec.path)?;
        let rule = rec
            .qa_rule()
            .filter(|q| raster.band_index(&q.band).is_some());
        let prepared = match usable_pixels(&raster, rule.as_ref())? {
            Some(usable) => raster.masked(&usable),
            None => raster,
        };
        let prepared = Arc::new(prepared);
        self.scenes
            .lock()
            .unwrap()
            .entry(rec.path.clone())
            .or_insert_with(|| Arc::clone(&prepared));
        Ok(prepared)
    }

    /// Inserts an in-memory scene under `path`, bypassing disk.
    pub fn insert(&self, path: PathBuf, raster: Raster) {
        self.scenes.lock().unwrap().insert(path, Arc::new(raster));
    }
}

/// Copies each band of `src` into `dst` wherever `dst` is still nodata.
fn mosaic_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        if d.is_nan() {
            *d = *s;
        }
    }
}

/// Builds the channel stack for the tile `g`. Missing slots, absent bands and
/// cloud-masked pixels hold `spec.fill`. The target is left all-[`IGNORE`];
/// see [`assemble_target`].
pub fn assemble_stack(
    catalog: &Catalog,
    g: &GeoBox,
    target_date: NaiveDate,
    spec: &StackSpec,
    window: TemporalWindow,
    cache: &SceneCache,
) -> Result<TileSample> {
    spec.validate()?;
    let spec = spec.canonical();
    let n_pix = g.pixel_count();
    let channels = spec.channel_count();
    let layout = spec.layout();
    let mut input = vec![f32::NAN; channels * n_pix];
    let mut present = vec![false; layout.len()];

    let mut slot_base = 0;
    for s in &spec.satellites {
        let scenes = catalog.query_window(g, target_date, window, &[s.satellite]);
        let mut by_date: BTreeMap<NaiveDate, Vec<&SceneRecord>> = BTreeMap::new();
        for rec in scenes {
            by_date.entry(rec.timestamp).or_default().push(rec);
        }
        // newest dates land in the last slots; surplus old dates are dropped
        let dates: Vec<_> = by_date.keys().copied().collect();
        let kept = &dates[dates.len().saturating_sub(s.max_dates)..];
        let offset = s.max_dates - kept.len();
        for (k, date) in kept.iter().enumerate() {
            let slot = offset + k;
            let l = &layout[slot_base + slot];
            let block = &mut input[l.channel_start * n_pix..(l.channel_start + l.channel_count) * n_pix];
            for rec in &by_date[date] {
                let raster = cache.get(rec)?;
                for (bi, band) in s.bands.iter().enumerate() {
                    let Some(src_band) = raster.band_index(band) else { continue };
                    let method = if s.satellite.is_categorical_band(band) {
                        Resampling::Nearest
                    } else {
                        spec.resampling
                    };
                    let values = resample_bands(&raster, &[src_band], g, method)?;
                    mosaic_into(&mut block[bi * n_pix..(bi + 1) * n_pix], &values);
                }
            }
            present[slot_base + slot] = true;
        }
        slot_base += s.max_dates;
    }
    for v in &mut input {
        if v.is_nan() {
            *v = spec.fill;
        }
    }
    Ok(TileSample {
        id: String::new(),
        input,
        channels,
        height: g.height,
        width: g.width,
        target: vec![IGNORE; n_pix],
        geobox: *g,
        target_date,
        present,
        layout,
        fill: spec.fill,
    })
}

/// Target mask for `g` from `target` scenes dated in the target month.
/// Pixels without a label are [`IGNORE`].
pub fn assemble_target(
    catalog: &Catalog,
    g: &GeoBox,
    target_date: NaiveDate,
    target: Satellite,
    cache: &SceneCache,
) -> Result<Vec<u8>> {
    let scenes = catalog.query_window(g, target_date, TemporalWindow::PlusMinusMonths(0), &[target]);
    let mut values = vec![f32::NAN; g.pixel_count()];
    for rec in scenes {
        debug_assert_eq!(month_index(rec.timestamp), month_index(target_date));
        let raster = cache.get(rec)?;
        let v = resample_bands(&raster, &[0], g, Resampling::Nearest)?;
        mosaic_into(&mut values, &v);
    }
    Ok(values
        .iter()
        .map(|&v| match v {
            v if v == 1.0 => 1,
            v if v == 0.0 => 0,
            _ => IGNORE,
        })
        .collect())
}

/// Land pixels of `g` from Synthetic scenes carrying a `LandMask` band, if any.
pub fn land_mask(catalog: &Catalog, g: &GeoBox, cache: &SceneCache) -> Result<Option<Vec<bool>>> {
    let mut values: Option<Vec<f32>> = None;
    for rec in catalog.records() {
        if rec.satellite != Satellite::Synthetic
            || !rec.bands.iter().any(|b| b == LAND_MASK_BAND)
            || !rec.geobox.intersects(g)
        {
            continue;
        }
        let raster = cache.get(rec)?;
        let band = raster.band_index(LAND_MASK_BAND).expect("record lists band");
        let v = resample_bands(&raster, &[band], g, Resampling::Nearest)?;
        match &mut values {
            Some(acc) => mosaic_into(acc, &v),
            None => values = Some(v),
        }
    }
    Ok(values.map(|v| v.iter().map(|&x| x == 1.0).collect()))
}

pub fn land_fraction(land: &[bool]) -> f64 {
    if land.is_empty() {
        return 0.0;
    }
    land.iter().filter(|l| **l).count() as f64 / land.len() as f64
}

/// Keeps a tile iff at least one fifth of it is land (boundary kept).
pub fn keep_by_land(land: &[bool]) -> bool {
    let n = land.iter().filter(|l| **l).count();
    !land.is_empty() && 5 * n >= land.len()
}

/// Every full tile under every target scene, stacked and labelled, sorted
/// by id. Tiles without a single labelled pixel are skipped, as are tiles
/// failing the land-fraction rule when `use_land_mask` is set and a land
/// mask exists. When several target scenes yield the same id, the first in
/// catalog order wins.
pub fn build_tiles(
    catalog: &Catalog,
    spec: &StackSpec,
    window: TemporalWindow,
    use_land_mask: bool,
    cache: &SceneCache,
) -> Result<Vec<TileSample>> {
    spec.validate()?;
    let spec = spec.canonical();
    let mut planned = Vec::new();
    for rec in catalog.records().iter().filter(|r| r.satellite == spec.target) {
        for (id, g) in store::plan_tiles(&rec.geobox, rec.timestamp, spec.tile_size)? {
            planned.push((id, g, rec.timestamp));
        }
    }
    let mut seen = std::collections::HashSet::new();
    planned.retain(|(id, _, _)| seen.insert(id.clone()));

    let built: Vec<Option<TileSample>> = planned
        .par_iter()
        .map(|(id, g, date)| {
            let target = assemble_target(catalog, g, *date, spec.target, cache)?;
            if target.iter().all(|&t| t == IGNORE) {
                return Ok(None);
            }
            if use_land_mask {
                if let Some(land) = land_mask(catalog, g, cache)? {
                    if !keep_by_land(&land) {
                        return Ok(None);
                    }
                }
            }
            let mut s = assemble_stack(catalog, g, *date, &spec, window, cache)?;
            s.id = id.clone();
            s.target = target;
            Ok(Some(s))
        })
        .collect::<Result<_>>()?;
    let mut tiles: Vec<TileSample> = built.into_iter().flatten().collect();
    tiles.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(tiles)
}
