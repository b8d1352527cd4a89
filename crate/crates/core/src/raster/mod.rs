//! Geo-referenced multi-band rasters on a plate-carrée lon/lat grid.

mod qa;
mod resample;
mod satellite;
pub mod tsrf;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use qa::usable_pixels;
pub use qa::{cloud_mask, cloud_mask_with};
pub(crate) use resample::resample_bands;
pub use resample::{crop_window, resample, Resampling};
pub use satellite::{QaRule, Satellite, DEG_PER_METRE};

/// Tolerance for comparing pixel sizes of two grids.
pub const PIXEL_SIZE_TOLERANCE: f64 = 1e-9;

/// Axis-aligned lon/lat footprint plus pixel grid. Row 0 is the northern edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
    pub width: usize,
    pub height: usize,
}

impl GeoBox {
    pub fn new(west: f64, south: f64, east: f64, north: f64, width: usize, height: usize) -> Result<Self> {
        let g = GeoBox {
            west,
            south,
            east,
            north,
            width,
            height,
        };
        g.validate()?;
        Ok(g)
    }

    /// Box whose north-west corner is `(west, north)` with square pixels of `pixel` degrees.
    pub fn from_origin(west: f64, north: f64, pixel: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            west,
            north - pixel * height as f64,
            west + pixel * width as f64,
            north,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.west, self.south, self.east, self.north]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidGeoBox("non-finite bounds".into()));
        }
        if !(self.west < self.east && self.south < self.north) {
            return Err(Error::InvalidGeoBox(format!(
                "bounds must satisfy west < east and south < north, got {self:?}"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGeoBox("width and height must be >= 1".into()));
        }
        Ok(())
    }

    pub fn pixel_size_x(&self) -> f64 {
        (self.east - self.west) / self.width as f64
    }

    pub fn pixel_size_y(&self) -> f64 {
        (self.north - self.south) / self.height as f64
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Center of pixel (`col`, `row`) as (lon, lat).
    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.west + (col as f64 + 0.5) * self.pixel_size_x(),
            self.north - (row as f64 + 0.5) * self.pixel_size_y(),
        )
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.west + self.east),
            0.5 * (self.south + self.north),
        )
    }

    /// Positive-area overlap. Boxes that only share an edge do not intersect.
    pub fn intersects(&self, other: &GeoBox) -> bool {
        self.west < other.east
            && other.west < self.east
            && self.south < other.north
            && other.south < self.north
    }

    pub fn same_pixel_size(&self, other: &GeoBox) -> bool {
        (self.pixel_size_x() - other.pixel_size_x()).abs() <= PIXEL_SIZE_TOLERANCE
            && (self.pixel_size_y() - other.pixel_size_y()).abs() <= PIXEL_SIZE_TOLERANCE
    }

    /// Fractional column/row coordinates of a point, in pixel units from the NW corner.
    pub(crate) fn to_pixel(&self, lon: f64, lat: f64) -> (f64, f64) {
        (
            (lon - self.west) / self.pixel_size_x(),
            (self.north - lat) / self.pixel_size_y(),
        )
    }

    /// Sub-window of `size`×`size` pixels starting at pixel (`col`, `row`).
    pub fn window(&self, col: usize, row: usize, width: usize, height: usize) -> Result<GeoBox> {
        let px = self.pixel_size_x();
        let py = self.pixel_size_y();
        GeoBox::new(
            self.west + col as f64 * px,
            self.north - (row + height) as f64 * py,
            self.west + (col + width) as f64 * px,
            self.north - row as f64 * py,
            width,
            height,
        )
    }
}

/// Band-major, row-major float raster. Nodata is NaN in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    geobox: GeoBox,
    bands: Vec<String>,
    data: Vec<f32>,
    timestamp: NaiveDate,
    satellite: Satellite,
}

impl Raster {
    pub fn new(
        satellite: Satellite,
        timestamp: NaiveDate,
        geobox: GeoBox,
        bands: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        geobox.validate()?;
        if bands.is_empty() {
            return Err(Error::InvalidRaster("raster needs at least one band".into()));
        }
        for (i, b) in bands.iter().enumerate() {
            if bands[..i].contains(b) {
                return Err(Error::InvalidRaster(format!("duplicate band name `{b}`")));
            }
        }
        let expected = bands.len() * geobox.pixel_count();
        if data.len() != expected {
            return Err(Error::InvalidRaster(format!(
                "data length {} != bands({}) x height({}) x width({})",
                data.len(),
                bands.len(),
                geobox.height,
                geobox.width
            )));
        }
        if satellite.is_mask() {
            if let Some(v) = data.iter().find(|v| !(v.is_nan() || **v == 0.0 || **v == 1.0)) {
                return Err(Error::InvalidRaster(format!(
                    "{satellite} mask holds value {v}; only 0, 1 and nodata are allowed"
                )));
            }
        }
        Ok(Raster {
            geobox,
            bands,
            data,
            timestamp,
            satellite,
        })
    }

    /// All-nodata raster.
    pub fn empty(satellite: Satellite, timestamp: NaiveDate, geobox: GeoBox, bands: Vec<String>) -> Result<Self> {
        let n = bands.len() * geobox.pixel_count();
        Self::new(satellite, timestamp, geobox, bands, vec![f32::NAN; n])
    }

    pub fn geobox(&self) -> &GeoBox {
        &self.geobox
    }

    pub fn bands(&self) -> &[String] {
        &self.bands
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn width(&self) -> usize {
        self.geobox.width
    }

    pub fn height(&self) -> usize {
        self.geobox.height
    }

    pub fn timestamp(&self) -> NaiveDate {
        self.timestamp
    }

    pub fn satellite(&self) -> Satellite {
        self.satellite
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b == name)
    }

    pub fn band(&self, index: usize) -> &[f32] {
        let n = self.geobox.pixel_count();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn band_by_name(&self, name: &str) -> Result<&[f32]> {
        self.band_index(name)
            .map(|i| self.band(i))
            .ok_or_else(|| Error::MissingBand {
                satellite: self.satellite.to_string(),
                band: name.to_string(),
            })
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.geobox.height + row) * self.geobox.width + col]
    }

    /// Copy of this raster with every pixel where `usable` is false set to nodata.
    pub fn masked(&self, usable: &[bool]) -> Raster {
        let n = self.geobox.pixel_count();
        assert_eq!(usable.len(), n, "mask must match raster grid");
        let mut data = self.data.clone();
        for band in data.chunks_mut(n) {
            for (v, &ok) in band.iter_mut().zip(usable) {
                if !ok {
                    *v = f32::NAN;
                }
            }
        }
        Raster { data, ..self.clone() }
    }

    /// Raster with the same metadata and new data; the caller guarantees the layout.
    pub(crate) fn with_grid(&self, geobox: GeoBox, data: Vec<f32>) -> Raster {
        debug_assert_eq!(data.len(), self.bands.len() * geobox.pixel_count());
        Raster {
            geobox,
            data,
            bands: self.bands.clone(),
            timestamp: self.timestamp,
            satellite: self.satellite,
        }
    }
}

/// Bit-level equality, treating NaN payloads as equal only when bits match.
pub fn bit_identical(a: &Raster, b: &Raster) -> bool {
    a.geobox == b.geobox
        && a.bands == b.bands
        && a.timestamp == b.timestamp
        && a.satellite == b.satellite
        && a.data.len() == b.data.len()
        && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
}
