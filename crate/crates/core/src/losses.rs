//! Supervised and consistency losses, built on the autodiff graph.
//!
//! Teacher probabilities and uncertainty maps enter as constants; only the
//! student probabilities carry gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the `log(1 - u_v)` penalty in the consistency loss.
    pub beta: f32,
    /// Clamp for probabilities inside logs, and for `u_v`, `U_s`.
    pub eps_u: f32,
    /// Floor for `U_f` in the double-uncertainty weight.
    pub eps_f: f32,
    /// Ramp-up length in steps.
    pub ramp_len: usize,
    pub omega_max: f32,
    pub dice_smooth: f32,
    /// Divide voxel entropy by `ln M`.
    pub normalize_entropy: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.001,
            eps_u: 1e-6,
            eps_f: 1e-6,
            ramp_len: 800,
            omega_max: 0.1,
            dice_smooth: 1e-5,
            normalize_entropy: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.eps_u > 0.0 && self.eps_u < 0.5) {
            return Err(Error::Config(format!("eps_u must be in (0, 0.5), got {}", self.eps_u)));
        }
        if !(self.eps_f > 0.0) {
            return Err(Error::Config(format!("eps_f must be > 0, got {}", self.eps_f)));
        }
        if self.ramp_len < 1 {
            return Err(Error::Config("ramp_len must be >= 1".into()));
        }
        if !(self.omega_max >= 0.0) || !(self.dice_smooth >= 0.0) {
            return Err(Error::Config("omega_max and dice_smooth must be >= 0".into()));
        }
        Ok(())
    }
}

fn class_dims(g: &Graph, probs: Var, target: &[u8]) -> Result<(usize, usize)> {
    let shape = g.value(probs).shape();
    let [m, h, w] = shape[..] else {
        return Err(Error::shape("loss", format!("probs must be (M,H,W), got {shape:?}")));
    };
    if target.len() != h * w {
        return Err(Error::shape("loss", format!("target has {} voxels, probs {}", target.len(), h * w)));
    }
    if let Some(&bad) = target.iter().find(|&&c| c as usize >= m) {
        return Err(Error::InvalidArgument(format!("class index {bad} >= {m}")));
    }
    Ok((m, h * w))
}

/// `(M,H,W)` one-hot encoding of `target`.
pub fn one_hot(target: &[u8], m: usize, hw: usize) -> Tensor {
    let mut t = Tensor::zeros(&[m, hw]);
    for (v, &c) in target.iter().enumerate() {
        t.data_mut()[c as usize * hw + v] = 1.0;
    }
    t
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    t.reshape(like.shape().to_vec()).expect("same element count")
}

/// Soft Dice loss over foreground classes `1..M`.
pub fn dice_loss(g: &mut Graph, probs: Var, target: &[u8], smooth: f32) -> Result<Var> {
    let (m, hw) = class_dims(g, probs, target)?;
    let like = g.value(probs).clone();
    let onehot = one_hot(target, m, hw);
    let mut ratio_sum: Option<Var> = None;
    for c in 1..m {
        let select = Tensor::from_fn(&[m, hw], |i| if i / hw == c { 1.0 } else { 0.0 });
        let y_c = Tensor::from_fn(&[m, hw], |i| if i / hw == c { onehot.data()[i] } else { 0.0 });
        let y_sum: f32 = y_c.data().iter().sum();
        let select = g.constant(reshape_like(select, &like));
        let y_c = g.constant(reshape_like(y_c, &like));
        let p_c = g.mul(probs, select)?;
        let p_sum = g.reduce_sum(p_c)?;
        let py = g.mul(probs, y_c)?;
        let inter = g.reduce_sum(py)?;
        let num = g.scalar_mul(inter, 2.0)?;
        let smooth_c = g.constant(Tensor::scalar(smooth));
        let num = g.add(num, smooth_c)?;
        let den_c = g.constant(Tensor::scalar(y_sum + smooth));
        let den = g.add(p_sum, den_c)?;
        let ratio = g.div(num, den)?;
        ratio_sum = Some(match ratio_sum {
            None => ratio,
            Some(acc) => g.add(acc, ratio)?,
        });
    }
    let mean = g.scalar_mul(ratio_sum.expect("M >= 2"), 1.0 / (m - 1) as f32)?;
    let one = g.constant(Tensor::scalar(1.0));
    g.sub(one, mean)
}

/// Mean over voxels of `-log p_target`, with probabilities clamped to `[eps, 1]`.
pub fn cross_entropy_loss(g: &mut Graph, probs: Var, target: &[u8], eps: f32) -> Result<Var> {
    let (m, hw) = class_dims(g, probs, target)?;
    let like = g.value(probs).clone();
    let onehot = g.constant(reshape_like(one_hot(target, m, hw), &like));
    let p = g.clamp(probs, eps, 1.0)?;
    let logp = g.log(p)?;
    let picked = g.mul(logp, onehot)?;
    let s = g.reduce_sum(picked)?;
    g.scalar_mul(s, -1.0 / hw as f32)
}

/// Cross-entropy plus Dice.
pub fn supervised_loss(g: &mut Graph, probs: Var, target: &[u8], cfg: &LossConfig) -> Result<Var> {
    let ce = cross_entropy_loss(g, probs, target, cfg.eps_u)?;
    let dice = dice_loss(g, probs, target, cfg.dice_smooth)?;
    g.add(ce, dice)
}

/// Broadcasts a `(H,W)` map over `m` classes.
fn broadcast_classes(map: &Tensor, m: usize) -> Tensor {
    let hw = map.len();
    Tensor::from_fn(&[m, hw], |i| map.data()[i % hw])
}

fn check_map(g: &Graph, s: Var, u_v: &Tensor) -> Result<(usize, usize)> {
    let shape = g.value(s).shape();
    let [m, h, w] = shape[..] else {
        return Err(Error::shape("consistency", format!("student probs must be (M,H,W), got {shape:?}")));
    };
    if u_v.shape() != [h, w] {
        return Err(Error::shape("consistency", format!("u_v {:?} vs probs {shape:?}", u_v.shape())));
    }
    Ok((m, h * w))
}

/// `t' = (1 - u_v) t + u_v s` per voxel. `t` and `u_v` are constants.
pub fn modify_teacher(g: &mut Graph, teacher: &Tensor, student: Var, u_v: &Tensor) -> Result<Var> {
    let (m, _) = check_map(g, student, u_v)?;
    if teacher.shape() != g.value(student).shape() {
        return Err(Error::shape(
            "modify_teacher",
            format!("teacher {:?} vs student {:?}", teacher.shape(), g.value(student).shape()),
        ));
    }
    let u = broadcast_classes(u_v, m);
    let kept = Tensor::from_fn(teacher.shape(), |i| (1.0 - u.data()[i]) * teacher.data()[i]);
    let u = g.constant(reshape_like(u, teacher));
    let kept = g.constant(kept);
    let moved = g.mul(u, student)?;
    g.add(kept, moved)
}

/// `-(1/V) Σ_v [ Σ_i log(t'_{v,i}) s_{v,i} + β log(1 - u_v) ]`, with `t'`
/// clamped to `[eps, 1]` and `u_v` to `[eps, 1 - eps]` inside the logs.
pub fn consistency_loss(g: &mut Graph, t_prime: Var, student: Var, u_v: &Tensor, beta: f32, eps: f32) -> Result<Var> {
    let (_, hw) = check_map(g, student, u_v)?;
    let tc = g.clamp(t_prime, eps, 1.0)?;
    let logt = g.log(tc)?;
    let weighted = g.mul(logt, student)?;
    let ce = g.reduce_sum(weighted)?;
    let penalty: f64 =
        u_v.data().iter().map(|&u| (1.0 - u.clamp(eps, 1.0 - eps) as f64).ln()).sum::<f64>() * beta as f64;
    let penalty = g.constant(Tensor::scalar(penalty as f32));
    let total = g.add(ce, penalty)?;
    g.scalar_mul(total, -1.0 / hw as f32)
}

/// Mean squared difference between student and (constant) teacher probabilities.
pub fn mse_consistency(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.mul(d, d)?;
    g.reduce_mean(sq)
}

/// `ω(S) = ω_max · exp(-5 (1 - S/L)^2)`, with `S` capped at `L`.
pub fn rampup_weight(step: usize, ramp_len: usize, omega_max: f64) -> f64 {
    let l = ramp_len.max(1) as f64;
    let s = (step as f64).min(l);
    let x = 1.0 - s / l;
    omega_max * (-5.0 * x * x).exp()
}

/// `λ = -(ω / U_f) · log U_s` with `U_f` floored at `eps_f` and `U_s`
/// clamped to `[eps_u, 1 - eps_u]`.
pub fn double_uncertainty_weight(omega: f64, u_f: f64, u_s: f64, eps_f: f64, eps_u: f64) -> f64 {
    let u_f = u_f.max(eps_f);
    let u_s = u_s.clamp(eps_u, 1.0 - eps_u);
    -(omega / u_f) * u_s.ln()
}

/// `L = L_s + λ L_c`; a missing supervised term counts as zero.
pub fn total_loss(g: &mut Graph, supervised: Option<Var>, consistency: Option<Var>, lambda: f32) -> Result<Var> {
    let weighted = match consistency {
        Some(c) => Some(g.scalar_mul(c, lambda)?),
        None => None,
    };
    match (supervised, weighted) {
        (Some(s), Some(c)) => g.add(s, c),
        (Some(s), None) => Ok(s),
        (None, Some(c)) => Ok(c),
        (None, None) => Err(Error::InvalidArgument("total_loss: no loss terms".into())),
    }
}
