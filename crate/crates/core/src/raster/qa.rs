use super::{QaRule, Raster, Satellite};
use crate::error::{Error, Result};

/// Per-pixel usability from the satellite's default QA rule: 1 usable, 0 cloud or invalid.
pub fn cloud_mask(r: &Raster) -> Result<Raster> {
    cloud_mask_with(r, r.satellite().default_qa().as_ref())
}

/// Like [`cloud_mask`] with an explicit rule; `None` means every pixel is usable.
pub fn cloud_mask_with(r: &Raster, rule: Option<&QaRule>) -> Result<Raster> {
    let n = r.geobox().pixel_count();
    let data = match rule {
        None => vec![1.0; n],
        Some(rule) => {
            let qa = r.band_by_name(&rule.band)?;
            let bits = rule.mask();
            qa.iter()
                .map(|&v| {
                    if !v.is_finite() || v < 0.0 {
                        return 0.0;
                    }
                    if (v as u32) & bits == 0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    Raster::new(
        Satellite::Synthetic,
        r.timestamp(),
        *r.geobox(),
        vec!["usable".into()],
        data,
    )
}

pub(crate) fn usable_pixels(r: &Raster, rule: Option<&QaRule>) -> Result<Option<Vec<bool>>> {
    let Some(rule) = rule else { return Ok(None) };
    if r.band_index(&rule.band).is_none() {
        return Err(Error::MissingBand {
            satellite: r.satellite().to_string(),
            band: rule.band.clone(),
        });
    }
    let mask = cloud_mask_with(r, Some(rule))?;
    Ok(Some(mask.data().iter().map(|&v| v == 1.0).collect()))
}
