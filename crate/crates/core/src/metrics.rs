//! Overlap and surface-distance segmentation metrics on binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask, row-major, nonzero = foreground.
#[derive(Clone, Copy, Debug)]
pub struct MaskRef<'a> {
    pub data: &'a [u8],
    pub h: usize,
    pub w: usize,
}

impl<'a> MaskRef<'a> {
    pub fn new(data: &'a [u8], h: usize, w: usize) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("mask", format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Self { data, h, w })
    }

    fn fg(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

fn same_dims(a: &MaskRef, b: &MaskRef) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape("metrics", format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

fn counts(pred: &MaskRef, gt: &MaskRef) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut a = 0;
    let mut b = 0;
    for (&p, &g) in pred.data.iter().zip(gt.data) {
        let (p, g) = (p != 0, g != 0);
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    (inter, a, b)
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(pred: &MaskRef, gt: &MaskRef) -> Result<f64> {
    same_dims(pred, gt)?;
    let (inter, a, b) = counts(pred, gt);
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn jaccard(pred: &MaskRef, gt: &MaskRef) -> Result<f64> {
    same_dims(pred, gt)?;
    let (inter, a, b) = counts(pred, gt);
    let union = a + b - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the image count as background.
pub fn boundary(mask: &MaskRef) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if !mask.fg(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == mask.h
                || x + 1 == mask.w
                || !mask.fg(y - 1, x)
                || !mask.fg(y + 1, x)
                || !mask.fg(y, x - 1)
                || !mask.fg(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Directional boundary distances, each list sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceDistances {
    pub pred_to_gt: Vec<f64>,
    pub gt_to_pred: Vec<f64>,
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
/// Column pass finds the nearest site per column; the row pass minimises
/// over columns in integer arithmetic.
fn squared_distance_field(sites: &[(usize, usize)], h: usize, w: usize) -> Vec<i64> {
    const FAR: i64 = i64::MAX / 4;
    let mut col = vec![FAR; h * w];
    let mut is_site = vec![false; h * w];
    for &(y, x) in sites {
        is_site[y * w + x] = true;
    }
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if is_site[y * w + x] {
                last = Some(y);
            }
            if let Some(s) = last {
                col[y * w + x] = (y - s) as i64;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if is_site[y * w + x] {
                next = Some(y);
            }
            if let Some(s) = next {
                let d = (s - y) as i64;
                if d < col[y * w + x] {
                    col[y * w + x] = d;
                }
            }
        }
    }
    let mut out = vec![FAR; h * w];
    for y in 0..h {
        let row = &col[y * w..(y + 1) * w];
        for x in 0..w {
            let mut best = FAR;
            for (xs, &dy) in row.iter().enumerate() {
                if dy == FAR {
                    continue;
                }
                let dx = x as i64 - xs as i64;
                best = best.min(dx * dx + dy * dy);
            }
            out[y * w + x] = best;
        }
    }
    out
}

fn directional(from: &[(usize, usize)], field: &[i64], w: usize) -> Vec<f64> {
    let mut d: Vec<f64> = from.iter().map(|&(y, x)| (field[y * w + x] as f64).sqrt()).collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Boundary-to-boundary nearest distances in both directions. Undefined
/// (error) if either mask is empty.
pub fn surface_distances(pred: &MaskRef, gt: &MaskRef) -> Result<SurfaceDistances> {
    same_dims(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::UndefinedMetric("surface distance with an empty mask"));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let to_gt = squared_distance_field(&bg, gt.h, gt.w);
    let to_pred = squared_distance_field(&bp, pred.h, pred.w);
    Ok(SurfaceDistances { pred_to_gt: directional(&bp, &to_gt, gt.w), gt_to_pred: directional(&bg, &to_pred, pred.w) })
}

/// Inclusive percentile with linear interpolation on a sorted list.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Max of the two directional 95th percentiles.
pub fn hd95(d: &SurfaceDistances) -> f64 {
    percentile(&d.pred_to_gt, 95.0).max(percentile(&d.gt_to_pred, 95.0))
}

/// Mean of all distances, both directions pooled.
pub fn asd(d: &SurfaceDistances) -> f64 {
    let n = d.pred_to_gt.len() + d.gt_to_pred.len();
    if n == 0 {
        return 0.0;
    }
    (d.pred_to_gt.iter().sum::<f64>() + d.gt_to_pred.iter().sum::<f64>()) / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, pred: &MaskRef, gt: &MaskRef) -> Result<Self> {
        let (hd, sd) = match surface_distances(pred, gt) {
            Ok(d) => (Some(hd95(&d)), Some(asd(&d))),
            Err(Error::UndefinedMetric(_)) => (None, None),
            Err(e) => return Err(e),
        };
        Ok(Self { id: id.into(), dice: dice(pred, gt)?, jaccard: jaccard(pred, gt)?, hd95: hd, asd: sd })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub jaccard: f64,
    /// Means over samples where the surface metrics are defined.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Samples excluded from the surface-metric means.
    pub undefined_surface: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let dice = per_sample.iter().map(|s| s.dice).sum::<f64>() / n;
        let jaccard = per_sample.iter().map(|s| s.jaccard).sum::<f64>() / n;
        let defined: Vec<&SampleMetrics> = per_sample.iter().filter(|s| s.hd95.is_some()).collect();
        let mean = |f: fn(&SampleMetrics) -> Option<f64>| {
            (!defined.is_empty()).then(|| defined.iter().filter_map(|s| f(s)).sum::<f64>() / defined.len() as f64)
        };
        let hd95 = mean(|s| s.hd95);
        let asd = mean(|s| s.asd);
        Self { dice, jaccard, hd95, asd, undefined_surface: per_sample.len() - defined.len(), per_sample }
    }
}
