//! On-disk tile cache: `<id>.input.tsrf` / `<id>.target.tsrf` pairs plus a
//! JSON-lines index and the stack spec that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{StackSpec, TileSample, IGNORE};
use crate::error::{Error, Result};
use crate::raster::{tsrf, GeoBox, Raster, Satellite};

pub const INDEX_FILE: &str = "tiles.jsonl";
pub const SPEC_FILE: &str = "stack_spec.json";
/// Tile inputs never contain NaN; the file sentinel only needs to differ from any fill.
const INPUT_NODATA: f32 = f32::MIN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub id: String,
    pub target_date: NaiveDate,
    pub geobox: GeoBox,
    pub present: Vec<bool>,
    pub fill: f32,
}

impl TileEntry {
    pub fn center(&self) -> (f64, f64) {
        self.geobox.center()
    }
}

pub fn tile_id(target_date: NaiveDate, row: usize, col: usize) -> String {
    format!("{}_r{row:03}_c{col:03}", target_date.format("%Y%m%d"))
}

/// Full `tile_size` windows covering `region`, row-major from the north-west.
pub fn plan_tiles(region: &GeoBox, target_date: NaiveDate, tile_size: usize) -> Result<Vec<(String, GeoBox)>> {
    let mut out = Vec::new();
    for row in 0..region.height / tile_size {
        for col in 0..region.width / tile_size {
            let g = region.window(col * tile_size, row * tile_size, tile_size, tile_size)?;
            out.push((tile_id(target_date, row, col), g));
        }
    }
    Ok(out)
}

pub fn input_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.input.tsrf"))
}

pub fn target_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.target.tsrf"))
}

pub fn target_raster(s: &TileSample) -> Result<Raster> {
    let data = s
        .target
        .iter()
        .map(|&t| if t == IGNORE { f32::NAN } else { f32::from(t) })
        .collect();
    Raster::new(Satellite::Synthetic, s.target_date, s.geobox, vec!["target".into()], data)
}

pub fn write_tile(dir: &Path, s: &TileSample, channel_names: &[String]) -> Result<TileEntry> {
    let input = Raster::new(
        Satellite::Synthetic,
        s.target_date,
        s.geobox,
        channel_names.to_vec(),
        s.input.clone(),
    )?;
    tsrf::write_with(&input_path(dir, &s.id), &input, INPUT_NODATA, None)?;
    tsrf::write(&target_path(dir, &s.id), &target_raster(s)?)?;
    Ok(TileEntry {
        id: s.id.clone(),
        target_date: s.target_date,
        geobox: s.geobox,
        present: s.present.clone(),
        fill: s.fill,
    })
}

/// Decodes a target raster: 0, 1, anything else ignored.
pub fn decode_target(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| match v {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            _ => IGNORE,
        })
        .collect()
}

pub struct TileStore {
    dir: PathBuf,
    spec: StackSpec,
    entries: BTreeMap<String, TileEntry>,
}

impl TileStore {
    pub fn create(dir: &Path, spec: &StackSpec, entries: Vec<TileEntry>) -> Result<TileStore> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let spec = spec.canonical();
        let text = serde_json::to_string_pretty(&spec).map_err(|e| Error::json("encode stack spec", e))?;
        let spec_path = dir.join(SPEC_FILE);
        fs::write(&spec_path, text + "\n").map_err(|e| Error::io(format!("write {}", spec_path.display()), e))?;
        let store = TileStore {
            dir: dir.to_path_buf(),
            spec,
            entries: entries.into_iter().map(|e| (e.id.clone(), e)).collect(),
        };
        store.write_index()?;
        Ok(store)
    }

    fn write_index(&self) -> Result<()> {
        let path = self.dir.join(INDEX_FILE);
        let f = fs::File::create(&path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(format!("write {}", path.display()), e);
        for e in self.entries.values() {
            let line = serde_json::to_string(e).map_err(|e| Error::json("encode tile entry", e))?;
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn open(dir: &Path) -> Result<TileStore> {
        let spec_path = dir.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path)
            .map_err(|e| Error::io(format!("read {}", spec_path.display()), e))?;
        let spec: StackSpec =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("parse {}", spec_path.display()), e))?;
        spec.validate()?;
        let index = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index).map_err(|e| Error::io(format!("read {}", index.display()), e))?;
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: TileEntry = serde_json::from_str(line)
                .map_err(|err| Error::json(format!("{}:{}", index.display(), n + 1), err))?;
            entries.insert(e.id.clone(), e);
        }
        Ok(TileStore {
            dir: dir.to_path_buf(),
            spec: spec.canonical(),
            entries,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn spec(&self) -> &StackSpec {
        &self.spec
    }

    pub fn entries(&self) -> impl Iterator<Item = &TileEntry> {
        self.entries.values()
    }

    pub fn entry(&self, id: &str) -> Option<&TileEntry> {
        self.entries.get(id)
    }

    pub fn load(&self, id: &str) -> Result<TileSample> {
        let entry = self.entries.get(id).ok_or_else(|| {
            Error::io(
                format!("tile {id}"),
                std::io::Error::new(std::io::ErrorKind::NotFound, "not in tile index"),
            )
        })?;
        let input = tsrf::read(&input_path(&self.dir, id))?;
        let target = tsrf::read(&target_path(&self.dir, id))?;
        let layout = self.spec.layout();
        let channels = self.spec.channel_count();
        if input.band_count() != channels || layout.len() != entry.present.len() {
            return Err(Error::ChannelMismatch {
                expected: channels,
                found: input.band_count(),
            });
        }
        if target.geobox() != input.geobox() {
            return Err(Error::ShapeMismatch(format!("tile {id}: input and target grids differ")));
        }
        let g = *input.geobox();
        Ok(TileSample {
            id: id.to_string(),
            channels,
            height: g.height,
            width: g.width,
            target: decode_target(target.band(0)),
            input: input.into_data(),
            geobox: g,
            target_date: entry.target_date,
            present: entry.present.clone(),
            layout,
            fill: entry.fill,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_covers_full_tiles_only() {
        let region = GeoBox::from_origin(0.0, 1.0, 0.01, 130, 70).unwrap();
        let d = NaiveDate::from_ymd_opt(2019, 8, 1).unwrap();
        let tiles = plan_tiles(&region, d, 64).unwrap();
        assert_eq!(tiles.len(), 2);
        assert_eq!(tiles[1].0, "20190801_r000_c001");
        assert!((tiles[1].1.west - 0.64).abs() < 1e-12);
        assert_eq!(tiles[1].1.width, 64);
    }
}
