use serde::{Deserialize, Serialize};

use super::{StackSpec, TileSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel mean and population std over real (non-fill) pixels.
/// Channels with no real pixels, or zero spread, get std 1.
pub fn compute_stats(samples: &[TileSample]) -> Vec<ChannelStats> {
    let Some(first) = samples.first() else { return Vec::new() };
    let channels = first.channels;
    (0..channels)
        .map(|c| {
            let real = || {
                samples
                    .iter()
                    .flat_map(move |s| s.channel(c).iter().filter(move |&&v| v != s.fill))
                    .map(|&v| f64::from(v))
            };
            let (sum, count) = real().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if count == 0 {
                return ChannelStats { mean: 0.0, std: 1.0 };
            }
            let mean = sum / count as f64;
            let var = real().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
            let std = var.sqrt();
            ChannelStats {
                mean,
                std: if std > 1e-12 { std } else { 1.0 },
            }
        })
        .collect()
}

/// `(x - mean) / std` on real values using the spec's stats; fill becomes 0,
/// which is also the new fill.
pub fn normalize(s: &TileSample, spec: &StackSpec) -> Result<TileSample> {
    normalize_with(s, spec.stats.as_deref().unwrap_or(&[]))
}

pub fn normalize_with(s: &TileSample, stats: &[ChannelStats]) -> Result<TileSample> {
    if stats.len() != s.channels {
        return Err(Error::MissingStats {
            have: stats.len(),
            need: s.channels,
        });
    }
    let n = s.pixel_count();
    let mut out = s.clone();
    for (chunk, st) in out.input.chunks_mut(n).zip(stats) {
        for v in chunk {
            *v = if *v == s.fill {
                0.0
            } else {
                ((f64::from(*v) - st.mean) / st.std) as f32
            };
        }
    }
    out.fill = 0.0;
    Ok(out)
}
