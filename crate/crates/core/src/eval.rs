//! Pixel metrics, rank-based AUC, ensemble blending and binarization.
//!
//! Metrics are micro-averaged: confusion counts are summed over every pixel
//! of the evaluated region before any ratio is taken.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub ignored: u64,
}

impl ConfusionCounts {
    pub fn evaluated(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn total(&self) -> u64 {
        self.evaluated() + self.ignored
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
            ignored: self.ignored + o.ignored,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], ignore: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() || gt.len() != ignore.len() {
        return Err(Error::ShapeMismatch(format!(
            "confusion: {} predictions, {} labels, {} ignore flags",
            pred.len(),
            gt.len(),
            ignore.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for ((&p, &g), &skip) in pred.iter().zip(gt).zip(ignore) {
        if skip {
            c.ignored += 1;
            continue;
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::InvalidLabel(f64::from(if p > 1 { p } else { g }))),
        }
    }
    Ok(c)
}

/// Ratios of a confusion matrix; `None` where the ratio is 0/0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixel_accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        pixel_accuracy: ratio(c.tp + c.tn, c.evaluated()),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    }
}

fn check_score(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidScore(v))
    }
}

/// Mann-Whitney AUC with average ranks for ties. The rank sum is kept as an
/// integer of doubled ranks, so the result equals the pair-counting
/// definition exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8], ignore: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || labels.len() != ignore.len() {
        return Err(Error::ShapeMismatch(format!(
            "roc_auc: {} scores, {} labels, {} ignore flags",
            scores.len(),
            labels.len(),
            ignore.len()
        )));
    }
    let mut pairs = Vec::with_capacity(scores.len());
    for ((&s, &l), &skip) in scores.iter().zip(labels).zip(ignore) {
        if skip {
            continue;
        }
        if l > 1 {
            return Err(Error::InvalidLabel(f64::from(l)));
        }
        if s.is_nan() {
            return Err(Error::InvalidScore(s));
        }
        pairs.push((s, l == 1));
    }
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels { positives, negatives });
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Tie group at sorted positions i..j has average 1-based rank (i+1+j)/2.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i + 1;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let pos_in_group = pairs[i..j].iter().filter(|p| p.1).count() as u128;
        doubled_rank_sum += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let p = positives as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * negatives as u128) as f64)
}

/// Pixel-wise unweighted mean. Each pixel's values are summed in sorted
/// order in f64, so the result does not depend on the order of `maps`.
pub fn blend(maps: &[&[f32]]) -> Result<Vec<f32>> {
    let first = maps.first().ok_or(Error::EmptyEnsemble)?;
    if let Some(m) = maps.iter().find(|m| m.len() != first.len()) {
        return Err(Error::ShapeMismatch(format!(
            "blend: maps of {} and {} pixels",
            first.len(),
            m.len()
        )));
    }
    let k = maps.len();
    let mut column = vec![0f32; k];
    let mut out = Vec::with_capacity(first.len());
    for px in 0..first.len() {
        for (slot, m) in column.iter_mut().zip(maps) {
            check_score(f64::from(m[px]))?;
            *slot = m[px];
        }
        column.sort_by(f32::total_cmp);
        let sum: f64 = column.iter().map(|&v| f64::from(v)).sum();
        out.push((sum / k as f64) as f32);
    }
    Ok(out)
}

/// `value >= threshold` becomes 1; everything else (including NaN) 0.
pub fn binarize(map: &[f32], threshold: f32) -> Vec<u8> {
    map.iter().map(|&v| u8::from(v >= threshold)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f32,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub auc: Option<f64>,
    pub tiles: Vec<TileMetrics>,
}

/// One evaluated tile: probabilities, labels and ignore flags of equal length.
pub struct Scored<'a> {
    pub id: &'a str,
    pub probs: &'a [f32],
    pub labels: &'a [u8],
    pub ignore: &'a [bool],
}

/// Micro-averaged report over `tiles`. AUC is `None` when not requested or
/// when the region lacks one of the classes.
pub fn evaluate(tiles: &[Scored], threshold: f32, with_auc: bool) -> Result<MetricsReport> {
    let mut per_tile = Vec::with_capacity(tiles.len());
    for t in tiles {
        for &p in t.probs {
            check_score(f64::from(p))?;
        }
        let counts = confusion(&binarize(t.probs, threshold), t.labels, t.ignore)?;
        per_tile.push(TileMetrics {
            id: t.id.to_string(),
            counts,
            metrics: metrics(&counts),
        });
    }
    let counts: ConfusionCounts = per_tile.iter().map(|t| t.counts).sum();
    let auc = if with_auc {
        let scores: Vec<f64> = tiles.iter().flat_map(|t| t.probs.iter().map(|&p| f64::from(p))).collect();
        let labels: Vec<u8> = tiles.iter().flat_map(|t| t.labels.iter().copied()).collect();
        let ignore: Vec<bool> = tiles.iter().flat_map(|t| t.ignore.iter().copied()).collect();
        match roc_auc(&scores, &labels, &ignore) {
            Ok(a) => Some(a),
            Err(Error::DegenerateLabels { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(MetricsReport {
        threshold,
        counts,
        metrics: metrics(&counts),
        auc,
        tiles: per_tile,
    })
}

fn cell(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map_or_else(|| "undef".to_string(), |x| format!("{:.*}", digits, x * scale))
}

impl MetricsReport {
    /// Accuracy (percent), F1 and IoU as an aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>9} {:>7} {:>7}", "region", "Accuracy", "F1", "IoU");
        let mut row = |name: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<24} {:>9} {:>7} {:>7}",
                name,
                cell(m.pixel_accuracy, 100.0, 2),
                cell(m.f1, 1.0, 3),
                cell(m.iou, 1.0, 3)
            );
        };
        for t in &self.tiles {
            row(&t.id, &t.metrics);
        }
        row("all", &self.metrics);
        if let Some(a) = self.auc {
            let _ = writeln!(out, "AUC {a:.4}");
        }
        out
    }
}
