//! TSRF v1 raster files.
//!
//! Binary layout: the 8-byte magic `TSRF0001`, then little-endian `u32`
//! width, height and band count, then `f32` little-endian pixels, band-major
//! and row-major. Metadata lives in a JSON sidecar next to the data file
//! (`scene.tsrf` -> `scene.tsrf.json`).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{GeoBox, QaRule, Raster, Satellite};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TSRF0001";
pub const HEADER_LEN: usize = 20;
pub const DEFAULT_NODATA: f32 = -9999.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub satellite: Satellite,
    pub timestamp: NaiveDate,
    pub bands: Vec<String>,
    pub geobox: Bounds,
    pub nodata: f32,
    /// Overrides the satellite's default cloud rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<QaRule>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub bands: u32,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_header(h: Header) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[..8].copy_from_slice(MAGIC);
    out[8..12].copy_from_slice(&h.width.to_le_bytes());
    out[12..16].copy_from_slice(&h.height.to_le_bytes());
    out[16..20].copy_from_slice(&h.bands.to_le_bytes());
    out
}

fn decode_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, "file shorter than header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    Ok(Header {
        width: u(8),
        height: u(12),
        bands: u(16),
    })
}

pub fn read_header(path: &Path) -> Result<Header> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut buf = [0u8; HEADER_LEN];
    f.read_exact(&mut buf)
        .map_err(|_| format_err(path, "file shorter than header"))?;
    decode_header(path, &buf)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let sc = sidecar_path(path);
    let text = fs::read_to_string(&sc).map_err(|e| Error::io(format!("read {}", sc.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parse {}", sc.display()), e))
}

pub fn geobox_of(sidecar: &Sidecar, header: Header) -> Result<GeoBox> {
    let b = sidecar.geobox;
    GeoBox::new(
        b.west,
        b.south,
        b.east,
        b.north,
        header.width as usize,
        header.height as usize,
    )
}

pub fn read(path: &Path) -> Result<Raster> {
    let sidecar = read_sidecar(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let header = decode_header(path, &bytes)?;
    let n = header.width as usize * header.height as usize * header.bands as usize;
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(format_err(
            path,
            format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - HEADER_LEN),
        ));
    }
    if sidecar.bands.len() != header.bands as usize {
        return Err(format_err(
            path,
            format!(
                "sidecar lists {} bands, binary header {}",
                sidecar.bands.len(),
                header.bands
            ),
        ));
    }
    let nodata_bits = sidecar.nodata.to_bits();
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if v.to_bits() == nodata_bits {
                f32::NAN
            } else {
                v
            }
        })
        .collect();
    let geobox = geobox_of(&sidecar, header)?;
    Raster::new(sidecar.satellite, sidecar.timestamp, geobox, sidecar.bands, data)
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    write_with(path, r, DEFAULT_NODATA, None)
}

/// Writes the binary file and its sidecar. NaN is stored as `nodata`.
pub fn write_with(path: &Path, r: &Raster, nodata: f32, qa: Option<QaRule>) -> Result<()> {
    if !nodata.is_finite() {
        return Err(format_err(path, "nodata sentinel must be finite"));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
        }
    }
    let g = r.geobox();
    let header = Header {
        width: g.width as u32,
        height: g.height as u32,
        bands: r.band_count() as u32,
    };
    let f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(format!("write {}", path.display()), e);
    w.write_all(&encode_header(header)).map_err(io)?;
    for &v in r.data() {
        let v = if v.is_nan() { nodata } else { v };
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let sidecar = Sidecar {
        satellite: r.satellite(),
        timestamp: r.timestamp(),
        bands: r.bands().to_vec(),
        geobox: Bounds {
            west: g.west,
            south: g.south,
            east: g.east,
            north: g.north,
        },
        nodata,
        qa,
    };
    let sc = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json("encode sidecar", e))?;
    fs::write(&sc, text + "\n").map_err(|e| Error::io(format!("write {}", sc.display()), e))
}
