//! Independent reference implementations used as test oracles.
//!
//! Everything here is written from the definitions with plain loops in f64
//! and shares no code with the library beyond reading parameter tensors.

#![allow(dead_code)]

use duwmt::segnet::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(r: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

/// Values in `[lo, hi]` with magnitude at least `gap`, i.e. away from zero.
pub fn away_from_zero(r: &mut ChaCha8Rng, n: usize, gap: f32, hi: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = r.gen_range(gap..hi);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Central differences of `f` around `x` in f64.
pub fn numeric_grad(x: &[f32], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let hi = f(&p);
            p[i] = orig - eps;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Largest absolute deviation, relative to the largest reference entry.
pub fn rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic.iter().zip(numeric).map(|(&a, &n)| (a as f64 - n).abs()).fold(0.0, f64::max) / scale
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// ---- reference ops on (C,H,W) planes ----

#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], b: &[f64], co: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b[o];
                for i in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y as isize + dy as isize - r;
                            let sx = xx as isize + dx as isize - r;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += wt[((o * c + i) * k + dy) * k + dx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn softmax_channel(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for v in 0..hw {
        let m = (0..c).map(|i| x[i * hw + v]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|i| (x[i * hw + v] - m).exp()).sum();
        for i in 0..c {
            out[i * hw + v] = (x[i * hw + v] - m).exp() / z;
        }
    }
    out
}

pub fn maxpool2x2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
    for i in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(i * oh + y / 2) * ow + xx / 2];
                *o = o.max(x[(i * h + y) * w + xx]);
            }
        }
    }
    out
}

pub fn upsample2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * w];
    for i in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(i * 2 * h + y) * 2 * w + xx] = x[(i * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

// ---- reference U-Net, deterministic pass ----

/// Logits `(M,H,W)` of the model described by `params` (flattened in model
/// parameter order) for a single-channel `image`.
pub fn unet_logits(model: &Model, params: &[f64], image: &[f64], h: usize, w: usize) -> Vec<f64> {
    let cfg = model.config();
    let mut offsets = Vec::new();
    let mut off = 0;
    for p in model.params() {
        offsets.push(off);
        off += p.value.len();
    }
    assert_eq!(off, params.len());
    let layer = |idx: usize, x: &[f64], ci: usize, hh: usize, ww: usize| -> (Vec<f64>, usize) {
        let ws = model.params()[2 * idx].value.shape();
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci);
        let wt = &params[offsets[2 * idx]..offsets[2 * idx] + co * ci * k * k];
        let b = &params[offsets[2 * idx + 1]..offsets[2 * idx + 1] + co];
        (conv2d(x, ci, hh, ww, wt, b, co, k), co)
    };
    let block = |first: usize, x: &[f64], ci: usize, hh: usize, ww: usize| -> (Vec<f64>, usize) {
        let (y, c1) = layer(first, x, ci, hh, ww);
        let (y, c2) = layer(first + 1, &relu(&y), c1, hh, ww);
        (relu(&y), c2)
    };
    let (e1, c1) = block(0, image, cfg.in_channels, h, w);
    let p1 = maxpool2x2(&e1, c1, h, w);
    let (e2, c2) = block(2, &p1, c1, h / 2, w / 2);
    let p2 = maxpool2x2(&e2, c2, h / 2, w / 2);
    let (bn, c3) = block(4, &p2, c2, h / 4, w / 4);
    let mut x = upsample2x(&bn, c3, h / 4, w / 4);
    x.extend_from_slice(&e2);
    let (d2, c4) = block(6, &x, c3 + c2, h / 2, w / 2);
    let mut x = upsample2x(&d2, c4, h / 2, w / 2);
    x.extend_from_slice(&e1);
    let (d1, c5) = block(8, &x, c4 + c1, h, w);
    layer(10, &d1, c5, h, w).0
}

// ---- reference losses on (M, HW) probabilities ----

pub fn cross_entropy(p: &[f64], target: &[u8], eps: f64) -> f64 {
    let hw = target.len();
    -target.iter().enumerate().map(|(v, &c)| p[c as usize * hw + v].clamp(eps, 1.0).ln()).sum::<f64>() / hw as f64
}

pub fn dice_loss(p: &[f64], target: &[u8], m: usize, smooth: f64) -> f64 {
    let hw = target.len();
    let mut ratio = 0.0;
    for c in 1..m {
        let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for v in 0..hw {
            let y = if target[v] as usize == c { 1.0 } else { 0.0 };
            inter += p[c * hw + v] * y;
            ps += p[c * hw + v];
            ys += y;
        }
        ratio += (2.0 * inter + smooth) / (ps + ys + smooth);
    }
    1.0 - ratio / (m - 1) as f64
}

pub fn consistency(t: &[f64], s: &[f64], u: &[f64], m: usize, beta: f64, eps: f64) -> f64 {
    let hw = u.len();
    let mut acc = 0.0;
    for v in 0..hw {
        for i in 0..m {
            let tp = (1.0 - u[v]) * t[i * hw + v] + u[v] * s[i * hw + v];
            acc += tp.clamp(eps, 1.0).ln() * s[i * hw + v];
        }
        acc += beta * (1.0 - u[v].clamp(eps, 1.0 - eps)).ln();
    }
    -acc / hw as f64
}

// ---- brute-force surface distances ----

pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == 0 {
                continue;
            }
            let bg = |yy: isize, xx: isize| {
                yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || mask[yy as usize * w + xx as usize] == 0
            };
            let (yi, xi) = (y as isize, x as isize);
            if bg(yi - 1, xi) || bg(yi + 1, xi) || bg(yi, xi - 1) || bg(yi, xi + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Sorted nearest-boundary distances from every boundary pixel of `a` to
/// the boundary of `b`, by exhaustive search.
pub fn directed_distances(a: &[u8], b: &[u8], h: usize, w: usize) -> Vec<f64> {
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    let mut d: Vec<f64> = ba
        .iter()
        .map(|&(y, x)| {
            bb.iter()
                .map(|&(yy, xx)| {
                    let dy = y as f64 - yy as f64;
                    let dx = x as f64 - xx as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d
}
