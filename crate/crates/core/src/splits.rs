//! Leakage-aware splitting: spatial grid K-fold, easy-tile downsampling and a
//! temporal year split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GeoBox;
use crate::seed;

/// What the splitters need to know about a tile.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitTile {
    pub id: String,
    pub geobox: GeoBox,
    pub target_date: NaiveDate,
    pub has_positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: BTreeMap<String, usize>,
    pub k: usize,
    pub cell_size: f64,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.get(id).copied()
    }

    pub fn ids_in(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn ids_not_in(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .filter(|(_, f)| **f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Replaces folds of the listed tiles, e.g. to reproduce hand-drawn regions.
    pub fn apply_override(&mut self, overrides: &BTreeMap<String, usize>) -> Result<()> {
        for (id, &fold) in overrides {
            if fold >= self.k {
                return Err(Error::InvalidSplit(format!(
                    "override puts {id} in fold {fold}, but K = {}",
                    self.k
                )));
            }
            self.folds.insert(id.clone(), fold);
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tile_id,fold\n");
        for (id, fold) in &self.folds {
            out.push_str(&format!("{id},{fold}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }
}

/// Parses a `tile_id,fold` CSV (header optional).
pub fn parse_fold_csv(text: &str) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("tile_id")) {
            continue;
        }
        let (id, fold) = line
            .split_once(',')
            .ok_or_else(|| Error::InvalidSplit(format!("line {}: expected `tile_id,fold`", n + 1)))?;
        let fold = fold
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidSplit(format!("line {}: bad fold `{}`", n + 1, fold.trim())))?;
        out.insert(id.trim().to_string(), fold);
    }
    Ok(out)
}

pub fn read_fold_csv(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_fold_csv(&text)
}

/// Grid cell of a point, counted from the north-west corner of the tile extent.
fn cell_of(center: (f64, f64), west: f64, north: f64, cell: f64) -> (i64, i64) {
    (
        ((north - center.1) / cell).floor() as i64,
        ((center.0 - west) / cell).floor() as i64,
    )
}

/// Assigns whole grid cells to folds: the grid starts at the north-west
/// corner of the tiles' joint footprint, a tile belongs to the cell holding
/// its center, and occupied cells are shuffled with `seed` and dealt to folds
/// round-robin. Every tile inherits its cell's fold.
pub fn spatial_kfold(tiles: &[SplitTile], k: usize, cell_size: f64, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidFoldCount(k));
    }
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(Error::InvalidSplit(format!("cell size must be positive, got {cell_size}")));
    }
    let largest_tile = tiles
        .iter()
        .map(|t| (t.geobox.east - t.geobox.west).max(t.geobox.north - t.geobox.south))
        .fold(0.0, f64::max);
    if cell_size < largest_tile * (1.0 - 1e-9) {
        return Err(Error::InvalidSplit(format!(
            "cell size {cell_size} is smaller than tile size {largest_tile}"
        )));
    }
    if tiles.is_empty() {
        return Ok(FoldAssignment {
            folds: BTreeMap::new(),
            k,
            cell_size,
        });
    }
    // Anchoring at footprint edges keeps centers of grid-aligned tiles off cell boundaries.
    let west = tiles.iter().map(|t| t.geobox.west).fold(f64::INFINITY, f64::min);
    let north = tiles.iter().map(|t| t.geobox.north).fold(f64::NEG_INFINITY, f64::max);

    let mut cells: BTreeMap<(i64, i64), Vec<&str>> = BTreeMap::new();
    for t in tiles {
        cells
            .entry(cell_of(t.geobox.center(), west, north, cell_size))
            .or_default()
            .push(&t.id);
    }
    if cells.len() == 1 {
        return Err(Error::DegenerateExtent(k));
    }
    let mut order: Vec<(i64, i64)> = cells.keys().copied().collect();
    order.shuffle(&mut seed::rng(seed, &[seed::hash_str("spatial_kfold")]));
    let mut folds = BTreeMap::new();
    for (i, cell) in order.iter().enumerate() {
        for id in &cells[cell] {
            folds.insert(id.to_string(), i % k);
        }
    }
    Ok(FoldAssignment { folds, k, cell_size })
}

/// Keeps each tile without positive pixels with probability `keep_prob`;
/// tiles with any positive pixel are always kept. Decisions depend only on
/// (seed, tile id).
pub fn downsample_easy(tiles: &[SplitTile], keep_prob: f64, seed: u64) -> Result<Vec<&SplitTile>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidSplit(format!("keep_prob must be in (0, 1], got {keep_prob}")));
    }
    Ok(tiles
        .iter()
        .filter(|t| {
            t.has_positive
                || keep_prob >= 1.0
                || seed::rng(seed, &[seed::hash_str(&t.id)]).random::<f64>() < keep_prob
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Tiles dated in `validation_year` validate, earlier ones train, later ones are an error.
pub fn temporal_split(tiles: &[SplitTile], validation_year: i32) -> Result<TemporalSplit> {
    let mut out = TemporalSplit::default();
    for t in tiles {
        let year = t.target_date.year();
        match year.cmp(&validation_year) {
            std::cmp::Ordering::Less => out.train.push(t.id.clone()),
            std::cmp::Ordering::Equal => out.validation.push(t.id.clone()),
            std::cmp::Ordering::Greater => {
                return Err(Error::FutureTile {
                    id: t.id.clone(),
                    year,
                    validation_year,
                })
            }
        }
    }
    Ok(out)
}
