//! Tiny stochastic U-Net style encoder-decoder.
//!
//! Two encoder blocks, a bottleneck and two decoder blocks, each block being
//! two 3x3 conv + relu layers followed by dropout. A 1x1 head maps to class
//! logits. One block output (before its dropout) is exposed as the feature
//! tap used for channel uncertainty.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::format::{self, SsegDims};
use crate::rng::{RngStream, StreamKey};
use crate::tensor::Tensor;
use crate::uncertainty::McSamples;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLayer {
    Enc1,
    Enc2,
    Bottleneck,
    Dec2,
    Dec1,
}

impl TapLayer {
    pub fn as_str(self) -> &'static str {
        match self {
            TapLayer::Enc1 => "enc1",
            TapLayer::Enc2 => "enc2",
            TapLayer::Bottleneck => "bottleneck",
            TapLayer::Dec2 => "dec2",
            TapLayer::Dec1 => "dec1",
        }
    }
}

impl FromStr for TapLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "enc1" => TapLayer::Enc1,
            "enc2" => TapLayer::Enc2,
            "bottleneck" => TapLayer::Bottleneck,
            "dec2" => TapLayer::Dec2,
            "dec1" => TapLayer::Dec1,
            other => return Err(Error::Config(format!("unknown tap layer `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub dropout_p: f32,
    pub tap_layer: TapLayer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 1, base_channels: 16, num_classes: 2, dropout_p: 0.5, tap_layer: TapLayer::Dec1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must be in [0,1), got {}", self.dropout_p)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel count of the tapped feature map.
    pub fn tap_channels(&self) -> usize {
        let b = self.base_channels;
        match self.tap_layer {
            TapLayer::Enc1 | TapLayer::Dec1 => b,
            TapLayer::Enc2 | TapLayer::Dec2 => 2 * b,
            TapLayer::Bottleneck => 4 * b,
        }
    }

    /// `(name, c_in, c_out, kernel)` for every conv layer, in parameter order.
    fn layers(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let (i, b, m) = (self.in_channels, self.base_channels, self.num_classes);
        vec![
            ("enc1.conv1", i, b, 3),
            ("enc1.conv2", b, b, 3),
            ("enc2.conv1", b, 2 * b, 3),
            ("enc2.conv2", 2 * b, 2 * b, 3),
            ("bottleneck.conv1", 2 * b, 4 * b, 3),
            ("bottleneck.conv2", 4 * b, 4 * b, 3),
            ("dec2.conv1", 6 * b, 2 * b, 3),
            ("dec2.conv2", 2 * b, 2 * b, 3),
            ("dec1.conv1", 3 * b, b, 3),
            ("dec1.conv2", b, b, 3),
            ("head", b, m, 1),
        ]
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Dropout behaviour for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Deterministic,
    Stochastic(StreamKey),
}

/// Additive Gaussian input noise, clipped to `[-clip, clip]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f32,
    pub clip: f32,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { sigma: 0.0, clip: 0.0 }
    }

    pub fn is_off(&self) -> bool {
        self.sigma == 0.0 || self.clip == 0.0
    }

    pub fn apply(&self, image: &Tensor, stream: &mut RngStream) -> Tensor {
        if self.is_off() {
            return image.clone();
        }
        let mut out = image.clone();
        for v in out.data_mut() {
            let n = (stream.normal() as f32 * self.sigma).clamp(-self.clip, self.clip);
            *v += n;
        }
        out
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: 0.1, clip: 0.2 }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub logits: Tensor,
    pub feature_tap: Tensor,
}

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub feature_tap: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
}

impl Model {
    /// He-uniform conv kernels, zero biases; fully determined by `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (idx, (name, ci, co, k)) in config.layers().into_iter().enumerate() {
            let fan_in = (ci * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let mut stream = StreamKey::new(seed, idx as u64).open();
            let w = Tensor::from_fn(&[co, ci, k, k], |_| stream.uniform_range(-bound, bound) as f32);
            params.push(Param { name: format!("{name}.weight"), value: w });
            params.push(Param { name: format!("{name}.bias"), value: Tensor::zeros(&[co]) });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone(), requires_grad)).collect()
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        match *image.shape() {
            [c, h, w] if c == self.config.in_channels && h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => Ok(()),
            _ => Err(Error::shape(
                "segnet.forward",
                format!(
                    "expected ({}, H, W) with H, W divisible by 4, got {:?}",
                    self.config.in_channels,
                    image.shape()
                ),
            )),
        }
    }

    /// Forward pass recorded on `g` using parameters previously `bind`-ed.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], image: Var, mode: Mode) -> Result<ForwardVars> {
        self.check_input(g.value(image))?;
        let mut stream = match mode {
            Mode::Deterministic => None,
            Mode::Stochastic(key) => Some(key.open()),
        };
        let p = self.config.dropout_p;
        let mut drop = |g: &mut Graph, x: Var| -> Result<Var> {
            match stream.as_mut() {
                Some(s) => g.dropout(x, p, s),
                None => Ok(x),
            }
        };
        let conv = |g: &mut Graph, x: Var, layer: usize| -> Result<Var> {
            g.conv2d(x, params[2 * layer], params[2 * layer + 1])
        };
        let block = |g: &mut Graph, x: Var, first: usize| -> Result<Var> {
            let y = conv(g, x, first)?;
            let y = g.relu(y)?;
            let y = conv(g, y, first + 1)?;
            g.relu(y)
        };

        let mut taps = [None; 5];
        let e1 = block(g, image, 0)?;
        taps[0] = Some(e1);
        let e1 = drop(g, e1)?;
        let x = g.maxpool2x2(e1)?;
        let e2 = block(g, x, 2)?;
        taps[1] = Some(e2);
        let e2 = drop(g, e2)?;
        let x = g.maxpool2x2(e2)?;
        let bn = block(g, x, 4)?;
        taps[2] = Some(bn);
        let bn = drop(g, bn)?;
        let up = g.upsample_nearest2x(bn)?;
        let x = g.concat_channel(&[up, e2])?;
        let d2 = block(g, x, 6)?;
        taps[3] = Some(d2);
        let d2 = drop(g, d2)?;
        let up = g.upsample_nearest2x(d2)?;
        let x = g.concat_channel(&[up, e1])?;
        let d1 = block(g, x, 8)?;
        taps[4] = Some(d1);
        let d1 = drop(g, d1)?;
        let logits = conv(g, d1, 10)?;
        let tap = match self.config.tap_layer {
            TapLayer::Enc1 => taps[0],
            TapLayer::Enc2 => taps[1],
            TapLayer::Bottleneck => taps[2],
            TapLayer::Dec2 => taps[3],
            TapLayer::Dec1 => taps[4],
        };
        Ok(ForwardVars { logits, feature_tap: tap.expect("tap recorded") })
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<ForwardResult> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = self.forward_graph(&mut g, &params, x, mode)?;
        Ok(ForwardResult { logits: g.value(out.logits).clone(), feature_tap: g.value(out.feature_tap).clone() })
    }

    /// Per-voxel class probabilities of a deterministic pass.
    pub fn predict_probs(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = self.forward_graph(&mut g, &params, x, Mode::Deterministic)?;
        let probs = g.softmax_channel(out.logits)?;
        Ok(g.value(probs).clone())
    }

    /// `passes` stochastic forward passes. Pass `t` draws its dropout masks
    /// from `base.child(t).child(0)` and its input noise from
    /// `base.child(t).child(1)`, so the result does not depend on how the
    /// passes are scheduled across threads.
    pub fn mc_sample(&self, image: &Tensor, passes: usize, base: StreamKey, noise: NoiseSpec) -> Result<McSamples> {
        if passes < 2 {
            return Err(Error::InvalidArgument(format!("mc_sample needs T >= 2, got {passes}")));
        }
        self.check_input(image)?;
        let results: Vec<Result<(Tensor, Tensor)>> = (0..passes)
            .into_par_iter()
            .map(|t| {
                let key = base.child(t as u64);
                let noisy = noise.apply(image, &mut key.child(1).open());
                let mut g = Graph::new();
                let params = self.bind(&mut g, false);
                let x = g.constant(noisy);
                let out = self.forward_graph(&mut g, &params, x, Mode::Stochastic(key.child(0)))?;
                let probs = g.softmax_channel(out.logits)?;
                Ok((g.value(probs).clone(), g.value(out.feature_tap).clone()))
            })
            .collect();
        let mut probs = Vec::with_capacity(passes);
        let mut feats = Vec::with_capacity(passes);
        for r in results {
            let (p, f) = r?;
            probs.push(p);
            feats.push(f);
        }
        McSamples::new(probs, feats)
    }

    /// `w <- w - lr * grad` for every parameter, with grads given in
    /// parameter order.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f32) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "sgd_step: {} grads for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("sgd_step", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), g.shape())));
            }
            crate::autodiff::sgd_update(p.value.data_mut(), g.data(), lr)?;
        }
        Ok(())
    }

    /// Collects the gradients of bound parameters after `g.backward`.
    pub fn grads(&self, g: &Graph, params: &[Var]) -> Result<Vec<Tensor>> {
        params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| g.grad(v).cloned().ok_or_else(|| Error::Graph(format!("missing gradient for {}", p.name))))
            .collect()
    }

    /// Writes the parameters as consecutive `SSEG` records to `path`, with a
    /// JSON index (config, names, shapes, byte offsets) at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bin = Vec::new();
        let mut entries = Vec::new();
        for p in &self.params {
            let shape = p.value.shape();
            let dims = SsegDims {
                c: shape[0] as u32,
                h: shape.get(1).copied().unwrap_or(1) as u32,
                w: shape.iter().skip(2).product::<usize>() as u32,
            };
            entries.push(WeightEntry { name: p.name.clone(), shape: shape.to_vec(), offset: bin.len() });
            format::encode_sseg(dims, p.value.data(), &mut bin);
        }
        format::write_file(path, &bin)?;
        let index = WeightIndex { format: WEIGHTS_FORMAT.into(), config: self.config.clone(), params: entries };
        let json = serde_json::to_vec_pretty(&index)?;
        format::write_file(&index_path(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ipath = index_path(path);
        let index: WeightIndex =
            serde_json::from_slice(&format::read_file(&ipath)?).map_err(|e| Error::data(&ipath, e.to_string()))?;
        if index.format != WEIGHTS_FORMAT {
            return Err(Error::data(&ipath, format!("unknown weights format `{}`", index.format)));
        }
        let bin = format::read_file(path)?;
        let mut model = Model::build(index.config, 0)?;
        if model.params.len() != index.params.len() {
            return Err(Error::data(path, "parameter count does not match the architecture"));
        }
        for (p, e) in model.params.iter_mut().zip(&index.params) {
            if p.name != e.name || p.value.shape() != e.shape.as_slice() {
                return Err(Error::data(path, format!("parameter `{}` does not match architecture", e.name)));
            }
            let rec =
                bin.get(e.offset..).ok_or_else(|| Error::data(path, format!("offset of `{}` out of range", e.name)))?;
            let (dims, values, _) = format::decode_sseg(rec, path)?;
            if dims.count() != p.value.len() {
                return Err(Error::data(path, format!("record size mismatch for `{}`", e.name)));
            }
            p.value = Tensor::new(e.shape.clone(), values)?;
        }
        Ok(model)
    }
}

const WEIGHTS_FORMAT: &str = "duwmt-weights-v1";

#[derive(Serialize, Deserialize)]
struct WeightIndex {
    format: String,
    config: ModelConfig,
    params: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn index_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
