//! Index of on-disk scenes and temporal-window queries over it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::raster::{tsrf, GeoBox, QaRule, Satellite};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub satellite: Satellite,
    pub timestamp: NaiveDate,
    pub geobox: GeoBox,
    pub bands: Vec<String>,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<QaRule>,
}

impl SceneRecord {
    pub fn validate(&self) -> Result<()> {
        self.geobox.validate()?;
        if self.satellite != Satellite::Synthetic {
            for b in &self.bands {
                if self.satellite.band_index(b).is_none() {
                    return Err(Error::InvalidRaster(format!(
                        "band `{b}` is not a {} band",
                        self.satellite
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cloud rule in effect: the sidecar override, else the satellite default.
    pub fn qa_rule(&self) -> Option<QaRule> {
        self.qa.clone().or_else(|| self.satellite.default_qa())
    }
}

/// Calendar-month windows around a target date, inclusive at both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemporalWindow {
    /// Months `m - k ..= m + k` around the target month `m`.
    PlusMinusMonths(u32),
    /// Months `m - k ..= m`.
    TargetPlusPreviousMonths(u32),
}

impl Default for TemporalWindow {
    fn default() -> Self {
        TemporalWindow::PlusMinusMonths(2)
    }
}

pub(crate) fn month_index(d: NaiveDate) -> i64 {
    i64::from(d.year()) * 12 + i64::from(d.month0())
}

impl TemporalWindow {
    pub fn month_range(self, target: NaiveDate) -> (i64, i64) {
        let m = month_index(target);
        match self {
            TemporalWindow::PlusMinusMonths(k) => (m - i64::from(k), m + i64::from(k)),
            TemporalWindow::TargetPlusPreviousMonths(k) => (m - i64::from(k), m),
        }
    }

    pub fn contains(self, target: NaiveDate, date: NaiveDate) -> bool {
        let (lo, hi) = self.month_range(target);
        (lo..=hi).contains(&month_index(date))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct Catalog {
    records: Vec<SceneRecord>,
    index: BTreeMap<(Satellite, NaiveDate), Vec<usize>>,
}

pub struct CatalogBuild {
    pub catalog: Catalog,
    pub diagnostics: Vec<Diagnostic>,
}

impl Catalog {
    /// Builds a catalog, dropping exact duplicates of (satellite, timestamp, path).
    pub fn from_records(records: impl IntoIterator<Item = SceneRecord>) -> Catalog {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in records {
            if seen.insert((r.satellite, r.timestamp, r.path.clone())) {
                out.push(r);
            }
        }
        out.sort_by(|a, b| {
            (a.satellite, a.timestamp, &a.path).cmp(&(b.satellite, b.timestamp, &b.path))
        });
        let mut index: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, r) in out.iter().enumerate() {
            index.entry((r.satellite, r.timestamp)).or_default().push(i);
        }
        Catalog {
            records: out,
            index,
        }
    }

    pub fn records(&self) -> &[SceneRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn on(&self, satellite: Satellite, date: NaiveDate) -> impl Iterator<Item = &SceneRecord> {
        self.index
            .get(&(satellite, date))
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    /// Scenes of the requested satellites whose footprint intersects `g` and
    /// whose date lies in `window` around `target`, ordered by
    /// (satellite, date, path).
    pub fn query_window(
        &self,
        g: &GeoBox,
        target: NaiveDate,
        window: TemporalWindow,
        satellites: &[Satellite],
    ) -> Vec<&SceneRecord> {
        let (lo, hi) = window.month_range(target);
        let wanted: BTreeSet<_> = satellites.iter().copied().collect();
        let mut out = Vec::new();
        for &sat in &wanted {
            let first = first_of_month(lo);
            let range = self.index.range((sat, first)..=(sat, NaiveDate::MAX));
            for ((_, date), ids) in range {
                if month_index(*date) > hi {
                    break;
                }
                out.extend(
                    ids.iter()
                        .map(|&i| &self.records[i])
                        .filter(|r| r.geobox.intersects(g)),
                );
            }
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(format!("write {}", path.display()), e);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::json("encode scene record", e))?;
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_jsonl(path: &Path) -> Result<Catalog> {
        let f = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SceneRecord = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
            r.validate()?;
            records.push(r);
        }
        Ok(Catalog::from_records(records))
    }
}

fn first_of_month(month_index: i64) -> NaiveDate {
    let year = month_index.div_euclid(12) as i32;
    let month = month_index.rem_euclid(12) as u32 + 1;
    NaiveDate::from_ymd_opt(year, month, 1).unwrap_or(NaiveDate::MIN)
}

fn is_sidecar_candidate(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    let data_name = name.strip_suffix(".json")?;
    let data = path.with_file_name(data_name);
    (data_name.ends_with(".tsrf") || data.is_file()).then_some(data)
}

fn record_for(data: &Path) -> Result<SceneRecord> {
    let sidecar = tsrf::read_sidecar(data)?;
    let header = tsrf::read_header(data)?;
    if header.bands as usize != sidecar.bands.len() {
        return Err(Error::Format {
            path: data.to_path_buf(),
            reason: format!(
                "sidecar lists {} bands, binary header {}",
                sidecar.bands.len(),
                header.bands
            ),
        });
    }
    let geobox = tsrf::geobox_of(&sidecar, header)?;
    let path = fs::canonicalize(data).map_err(|e| Error::io(format!("canonicalize {}", data.display()), e))?;
    let record = SceneRecord {
        satellite: sidecar.satellite,
        timestamp: sidecar.timestamp,
        geobox,
        bands: sidecar.bands,
        path,
        qa: sidecar.qa,
    };
    record.validate()?;
    Ok(record)
}

/// Scans `root` recursively (following symlinks) for TSRF sidecars.
pub fn build_catalog(root: &Path) -> Result<CatalogBuild> {
    let meta = fs::metadata(root).map_err(|e| Error::io(format!("read {}", root.display()), e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            format!("catalog root {}", root.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for entry in WalkDir::new(root).follow_links(true).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                diagnostics.push(Diagnostic {
                    path: e.path().map(Path::to_path_buf).unwrap_or_default(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(data) = is_sidecar_candidate(entry.path()) else { continue };
        match record_for(&data) {
            Ok(r) => records.push(r),
            Err(e) => diagnostics.push(Diagnostic {
                path: entry.path().to_path_buf(),
                message: e.to_string(),
            }),
        }
    }
    Ok(CatalogBuild {
        catalog: Catalog::from_records(records),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn rec(sat: Satellite, date: &str, path: &str, g: GeoBox) -> SceneRecord {
        SceneRecord {
            satellite: sat,
            timestamp: d(date),
            geobox: g,
            bands: vec![],
            path: path.into(),
            qa: None,
        }
    }

    fn unit() -> GeoBox {
        GeoBox::new(0.0, 0.0, 1.0, 1.0, 10, 10).unwrap()
    }

    #[test]
    fn window_boundaries_plus_minus_two() {
        let w = TemporalWindow::PlusMinusMonths(2);
        let t = d("2019-08-15");
        assert!(w.contains(t, d("2019-06-01")));
        assert!(w.contains(t, d("2019-10-31")));
        assert!(!w.contains(t, d("2019-05-31")));
        assert!(!w.contains(t, d("2019-11-01")));
    }

    #[test]
    fn window_previous_three_months_across_year() {
        let w = TemporalWindow::TargetPlusPreviousMonths(3);
        let t = d("2020-02-01");
        assert!(w.contains(t, d("2019-11-01")));
        assert!(w.contains(t, d("2020-02-29")));
        assert!(!w.contains(t, d("2019-10-31")));
        assert!(!w.contains(t, d("2020-03-01")));
    }

    #[test]
    fn query_filters_and_orders() {
        let far = GeoBox::new(5.0, 5.0, 6.0, 6.0, 10, 10).unwrap();
        let c = Catalog::from_records(vec![
            rec(Satellite::Sentinel2, "2019-09-01", "b", unit()),
            rec(Satellite::Sentinel1, "2019-08-20", "a", unit()),
            rec(Satellite::Sentinel1, "2019-07-02", "c", unit()),
            rec(Satellite::Sentinel1, "2019-07-02", "c", unit()),
            rec(Satellite::Sentinel1, "2019-08-01", "far", far),
            rec(Satellite::Landsat8, "2019-08-01", "l", unit()),
        ]);
        assert_eq!(c.len(), 5);
        let got = c.query_window(
            &unit(),
            d("2019-08-15"),
            TemporalWindow::PlusMinusMonths(2),
            &[Satellite::Sentinel2, Satellite::Sentinel1],
        );
        let paths: Vec<_> = got.iter().map(|r| r.path.to_str().unwrap()).collect();
        assert_eq!(paths, ["c", "a", "b"]);
    }

    #[test]
    fn scene_on_target_date_under_both_windows() {
        let c = Catalog::from_records(vec![rec(Satellite::Sentinel1, "2019-08-15", "a", unit())]);
        for w in [
            TemporalWindow::PlusMinusMonths(2),
            TemporalWindow::TargetPlusPreviousMonths(3),
        ] {
            assert_eq!(c.query_window(&unit(), d("2019-08-15"), w, &[Satellite::Sentinel1]).len(), 1);
        }
    }

    #[test]
    fn band_validation() {
        let mut r = rec(Satellite::Sentinel1, "2019-08-15", "a", unit());
        r.bands = vec!["VV".into()];
        assert!(r.validate().is_ok());
        r.bands = vec!["B4".into()];
        assert!(r.validate().is_err());
        r.satellite = Satellite::Synthetic;
        assert!(r.validate().is_ok());
    }
}
