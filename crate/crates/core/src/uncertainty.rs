//! Feature (channel) and segmentation (entropy) uncertainty from MC samples.
//!
//! Reductions over passes sort the per-element values first, so every output
//! is bitwise invariant to the order of the passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `T` stochastic passes: per-pass class probabilities `(M,H,W)` and tapped
/// feature maps `(C,H',W')`.
#[derive(Clone, Debug, PartialEq)]
pub struct McSamples {
    probs: Vec<Tensor>,
    feats: Vec<Tensor>,
}

impl McSamples {
    pub fn new(probs: Vec<Tensor>, feats: Vec<Tensor>) -> Result<Self> {
        if probs.len() < 2 || probs.len() != feats.len() {
            return Err(Error::InvalidArgument(format!(
                "need T >= 2 matching passes, got {} probs / {} feats",
                probs.len(),
                feats.len()
            )));
        }
        check_consistent("McSamples.probs", &probs)?;
        check_consistent("McSamples.feats", &feats)?;
        Ok(Self { probs, feats })
    }

    pub fn passes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[Tensor] {
        &self.probs
    }

    pub fn feats(&self) -> &[Tensor] {
        &self.feats
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyBundle {
    /// `(H,W)` voxel entropy, normalized to `[0,1]` unless raw entropy was requested.
    pub u_v_map: Tensor,
    pub u_s: f32,
    /// `(C,H',W')` min-max normalized disagreement maps.
    pub u_c_maps: Tensor,
    pub u_c: Vec<f32>,
    pub u_f: f32,
}

fn check_consistent(what: &'static str, ts: &[Tensor]) -> Result<()> {
    let first = ts.first().ok_or_else(|| Error::InvalidArgument(format!("{what}: no passes")))?;
    if first.nchw().is_none() || first.rank() != 3 {
        return Err(Error::shape(what, format!("expected (C,H,W), got {:?}", first.shape())));
    }
    if let Some(t) = ts.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape(what, format!("{:?} vs {:?}", t.shape(), first.shape())));
    }
    Ok(())
}

/// Σ_{p<q} |x_p − x_q| per element, then per-channel min-max normalization.
/// A channel with constant accumulation maps to all zeros.
pub fn channel_uncertainty_maps(feats: &[Tensor]) -> Result<Tensor> {
    if feats.len() < 2 {
        return Err(Error::InvalidArgument(format!("need T >= 2 passes, got {}", feats.len())));
    }
    check_consistent("channel_uncertainty_maps", feats)?;
    let shape = feats[0].shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let t = feats.len();
    // For sorted x_(0) <= ... <= x_(T-1): Σ_{p<q} (x_(q) − x_(p)) = Σ_k (2k − T + 1) x_(k).
    let coef: Vec<f64> = (0..t).map(|k| (2 * k) as f64 - t as f64 + 1.0).collect();
    let mut acc = vec![0.0f64; c * h * w];
    let mut buf = vec![0.0f32; t];
    for (i, a) in acc.iter_mut().enumerate() {
        for (b, f) in buf.iter_mut().zip(feats) {
            *b = f.data()[i];
        }
        buf.sort_by(f32::total_cmp);
        *a = buf.iter().zip(&coef).map(|(&x, &k)| k * x as f64).sum();
    }
    let mut out = vec![0.0f32; c * h * w];
    for (plane, dst) in acc.chunks(h * w).zip(out.chunks_mut(h * w)) {
        let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi > lo {
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = ((v - lo) / (hi - lo)) as f32;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Spatial mean of each channel map.
pub fn channel_uncertainty_values(maps: &Tensor) -> Vec<f32> {
    let Some((_, c, h, w)) = maps.nchw() else {
        return Vec::new();
    };
    (0..c)
        .map(|ch| {
            let plane = &maps.data()[ch * h * w..(ch + 1) * h * w];
            (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32
        })
        .collect()
}

/// `U_f = (1/C) Σ_i (U_i − min_c U_c)`.
pub fn feature_uncertainty(u_c: &[f32]) -> Result<f32> {
    if u_c.is_empty() {
        return Err(Error::InvalidArgument("feature_uncertainty: empty channel list".into()));
    }
    let min = u_c.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let sum: f64 = u_c.iter().map(|&u| u as f64 - min).sum();
    Ok((sum / u_c.len() as f64) as f32)
}

/// Mean of the per-pass probabilities (teacher prediction), `(M,H,W)`.
pub fn mean_probs(probs: &[Tensor]) -> Result<Tensor> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("mean_probs: no passes".into()));
    }
    check_consistent("mean_probs", probs)?;
    let t = probs.len();
    let mut buf = vec![0.0f32; t];
    let data = (0..probs[0].len())
        .map(|i| {
            for (b, p) in buf.iter_mut().zip(probs) {
                *b = p.data()[i];
            }
            buf.sort_by(f32::total_cmp);
            (buf.iter().map(|&v| v as f64).sum::<f64>() / t as f64) as f32
        })
        .collect();
    Tensor::new(probs[0].shape().to_vec(), data)
}

const SIMPLEX_TOL: f32 = 1e-4;

fn check_simplex(probs: &Tensor) -> Result<()> {
    let (_, m, h, w) = probs.nchw().ok_or_else(|| Error::shape("voxel_uncertainty", "expected (M,H,W)"))?;
    let hw = h * w;
    for p in 0..hw {
        let mut s = 0.0f32;
        for c in 0..m {
            let v = probs.data()[c * hw + p];
            if !(0.0..=1.0 + SIMPLEX_TOL).contains(&v) {
                return Err(Error::InvalidArgument(format!("probability {v} outside [0,1]")));
            }
            s += v;
        }
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!("class probabilities sum to {s} at voxel {p}")));
        }
    }
    Ok(())
}

/// Entropy of the mean prediction per voxel, and its spatial mean.
/// With `normalize`, entropy is divided by `ln M` so the map lies in `[0,1]`.
pub fn voxel_uncertainty(probs: &[Tensor], normalize: bool) -> Result<(Tensor, f32)> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument(format!("need T >= 2 passes, got {}", probs.len())));
    }
    for p in probs {
        check_simplex(p)?;
    }
    let mean = mean_probs(probs)?;
    Ok(entropy_map(&mean, normalize))
}

/// Per-voxel entropy map `(H,W)` of a class-probability tensor `(M,H,W)`,
/// with `0·log 0 = 0`, and its spatial mean.
pub fn entropy_map(mean: &Tensor, normalize: bool) -> (Tensor, f32) {
    let (_, m, h, w) = mean.nchw().expect("(M,H,W)");
    let hw = h * w;
    let norm = if normalize { (m as f64).ln() } else { 1.0 };
    let mut out = vec![0.0f32; hw];
    let mut total = 0.0f64;
    for (p, o) in out.iter_mut().enumerate() {
        let mut ent = 0.0f64;
        for c in 0..m {
            let u = mean.data()[c * hw + p] as f64;
            if u > 0.0 {
                ent -= u * u.ln();
            }
        }
        let mut v = ent / norm;
        if normalize {
            v = v.clamp(0.0, 1.0);
        } else {
            v = v.max(0.0);
        }
        *o = v as f32;
        total += v;
    }
    let map = Tensor::new(vec![h, w], out).expect("entropy map shape");
    (map, (total / hw as f64) as f32)
}

/// Full double-uncertainty estimate for one input.
pub fn estimate(samples: &McSamples, normalize_entropy: bool) -> Result<UncertaintyBundle> {
    let (u_v_map, u_s) = voxel_uncertainty(samples.probs(), normalize_entropy)?;
    let u_c_maps = channel_uncertainty_maps(samples.feats())?;
    let u_c = channel_uncertainty_values(&u_c_maps);
    let u_f = feature_uncertainty(&u_c)?;
    Ok(UncertaintyBundle { u_v_map, u_s, u_c_maps, u_c, u_f })
}
