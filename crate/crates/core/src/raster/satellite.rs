//! Sensor table: band lists, nominal resolutions and QA conventions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Degrees per nominal metre on the working plate-carrée grid.
///
/// Only ratios matter downstream (Sentinel : Landsat : Fire CCI : VIIRS =
/// 1 : 3 : 25 : 50), so a flat 1e-5 deg/m is used everywhere.
pub const DEG_PER_METRE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Satellite {
    Sentinel1,
    Sentinel2,
    Landsat5,
    Landsat8,
    #[serde(rename = "VNP09H1")]
    Vnp09h1,
    #[serde(rename = "VNP13A1")]
    Vnp13a1,
    #[serde(rename = "MCD15A2H")]
    Mcd15a2h,
    #[serde(rename = "FIRMS")]
    Firms,
    DeforestationMask,
    FireCCI,
    Synthetic,
}

/// Per-pixel quality rule: a pixel is unusable when any of `bits` is set in `band`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRule {
    pub band: String,
    pub bits: Vec<u8>,
}

impl QaRule {
    pub fn mask(&self) -> u32 {
        self.bits.iter().fold(0u32, |m, &b| m | (1u32 << b))
    }
}

impl Satellite {
    pub const ALL: [Satellite; 11] = [
        Satellite::Sentinel1,
        Satellite::Sentinel2,
        Satellite::Landsat5,
        Satellite::Landsat8,
        Satellite::Vnp09h1,
        Satellite::Vnp13a1,
        Satellite::Mcd15a2h,
        Satellite::Firms,
        Satellite::DeforestationMask,
        Satellite::FireCCI,
        Satellite::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Satellite::Sentinel1 => "Sentinel1",
            Satellite::Sentinel2 => "Sentinel2",
            Satellite::Landsat5 => "Landsat5",
            Satellite::Landsat8 => "Landsat8",
            Satellite::Vnp09h1 => "VNP09H1",
            Satellite::Vnp13a1 => "VNP13A1",
            Satellite::Mcd15a2h => "MCD15A2H",
            Satellite::Firms => "FIRMS",
            Satellite::DeforestationMask => "DeforestationMask",
            Satellite::FireCCI => "FireCCI",
            Satellite::Synthetic => "Synthetic",
        }
    }

    /// Band list in canonical order. Empty for `Synthetic`, which accepts any band.
    pub fn bands(self) -> &'static [&'static str] {
        match self {
            Satellite::Sentinel1 => &["VV", "VH"],
            Satellite::Sentinel2 => &[
                "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B9", "B11", "B12", "QA60",
            ],
            Satellite::Landsat5 => &[
                "SR_B1", "SR_B2", "SR_B3", "SR_B4", "SR_B5", "ST_B6", "ST_B7", "QA_PIXEL",
            ],
            Satellite::Landsat8 => &[
                "SR_B1", "SR_B2", "SR_B3", "SR_B4", "SR_B5", "SR_B6", "SR_B7", "ST_B10",
                "QA_PIXEL",
            ],
            Satellite::Vnp09h1 => &["I1", "I2", "I3"],
            Satellite::Vnp13a1 => &["EVI", "NDVI", "NIR", "SWIR1", "SWIR2"],
            Satellite::Mcd15a2h => &["LAI", "FPAR"],
            Satellite::Firms => &["ActiveFire"],
            Satellite::DeforestationMask => &["Deforestation"],
            Satellite::FireCCI => &["BurnedArea"],
            Satellite::Synthetic => &[],
        }
    }

    pub fn band_index(self, band: &str) -> Option<usize> {
        self.bands().iter().position(|b| *b == band)
    }

    /// Nominal pixel size in metres.
    pub fn pixel_size_m(self) -> f64 {
        match self {
            Satellite::Sentinel1 | Satellite::Sentinel2 | Satellite::DeforestationMask => 10.0,
            Satellite::Landsat5 | Satellite::Landsat8 => 30.0,
            Satellite::FireCCI => 250.0,
            Satellite::Vnp09h1 | Satellite::Vnp13a1 | Satellite::Mcd15a2h => 500.0,
            Satellite::Firms => 375.0,
            Satellite::Synthetic => 10.0,
        }
    }

    pub fn pixel_size_deg(self) -> f64 {
        self.pixel_size_m() * DEG_PER_METRE
    }

    /// Revisit period in days (FIRMS is sub-daily; reported as 1).
    pub fn revisit_days(self) -> u32 {
        match self {
            Satellite::Sentinel1 => 6,
            Satellite::Sentinel2 => 5,
            Satellite::Landsat5 | Satellite::Landsat8 => 16,
            Satellite::Vnp09h1 | Satellite::Mcd15a2h => 8,
            Satellite::Vnp13a1 => 16,
            Satellite::Firms => 1,
            Satellite::DeforestationMask | Satellite::FireCCI => 30,
            Satellite::Synthetic => 1,
        }
    }

    /// First and (if retired) last year of the archive.
    pub fn temporal_extent(self) -> (i32, Option<i32>) {
        match self {
            Satellite::Sentinel1 => (2014, None),
            Satellite::Sentinel2 => (2018, None),
            Satellite::Landsat5 => (1984, Some(2012)),
            Satellite::Landsat8 => (2013, None),
            Satellite::Vnp09h1 | Satellite::Vnp13a1 => (2012, None),
            Satellite::Mcd15a2h | Satellite::Firms => (2002, None),
            Satellite::DeforestationMask => (2016, Some(2021)),
            Satellite::FireCCI => (2001, Some(2020)),
            Satellite::Synthetic => (1900, None),
        }
    }

    pub fn is_mask(self) -> bool {
        matches!(self, Satellite::DeforestationMask | Satellite::FireCCI)
    }

    /// Default cloud rule. Sentinel-2 QA60: bit 10 opaque cloud, bit 11 cirrus.
    /// Landsat Collection 2 QA_PIXEL: bit 1 dilated cloud, bit 3 cloud, bit 4 cloud shadow.
    pub fn default_qa(self) -> Option<QaRule> {
        match self {
            Satellite::Sentinel2 => Some(QaRule {
                band: "QA60".into(),
                bits: vec![10, 11],
            }),
            Satellite::Landsat5 | Satellite::Landsat8 => Some(QaRule {
                band: "QA_PIXEL".into(),
                bits: vec![1, 3, 4],
            }),
            _ => None,
        }
    }

    /// Bands that hold categorical data and must never be interpolated.
    pub fn is_categorical_band(self, band: &str) -> bool {
        self.is_mask()
            || self.default_qa().is_some_and(|qa| qa.band == band)
            || matches!(self, Satellite::Firms)
            || band == "LandMask"
    }
}

impl fmt::Display for Satellite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Satellite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Satellite::ALL
            .iter()
            .copied()
            .find(|sat| sat.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownSatellite(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_ladder_ratios() {
        let base = Satellite::Sentinel2.pixel_size_deg();
        let ratio = |s: Satellite| (s.pixel_size_deg() / base).round() as u32;
        assert_eq!(ratio(Satellite::Sentinel1), 1);
        assert_eq!(ratio(Satellite::Landsat8), 3);
        assert_eq!(ratio(Satellite::FireCCI), 25);
        assert_eq!(ratio(Satellite::Vnp09h1), 50);
    }

    #[test]
    fn names_round_trip() {
        for sat in Satellite::ALL {
            assert_eq!(sat.name().parse::<Satellite>().unwrap(), sat);
            let json = serde_json::to_string(&sat).unwrap();
            assert_eq!(json, format!("\"{}\"", sat.name()));
        }
        assert!("Sentinel3".parse::<Satellite>().is_err());
    }

    #[test]
    fn band_lists() {
        assert_eq!(Satellite::Sentinel2.bands().len(), 12);
        assert_eq!(Satellite::Landsat8.band_index("ST_B10"), Some(7));
        assert_eq!(Satellite::Sentinel1.band_index("B4"), None);
        assert!(Satellite::Sentinel2.is_categorical_band("QA60"));
        assert!(!Satellite::Sentinel2.is_categorical_band("B4"));
    }
}
