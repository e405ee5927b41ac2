//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. [`RunConfig::to_text`] writes every key, so a
//! resolved file fully describes a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::segnet::{ModelConfig, TapLayer};
use crate::trainer::{ConsistencyMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("in_channels", "input image channels"),
    ("base_channels", "width of the first encoder block (>= 4)"),
    ("num_classes", "number of segmentation classes M (>= 2)"),
    ("dropout_p", "dropout probability in [0,1)"),
    ("tap_layer", "feature tap: enc1 | enc2 | bottleneck | dec2 | dec1"),
    ("beta", "weight of the log(1 - u_v) penalty"),
    ("eps_u", "clamp for probabilities, u_v and U_s inside logs"),
    ("eps_f", "floor for U_f"),
    ("ramp_len", "ramp-up length L in steps"),
    ("omega_max", "ramp-up plateau value"),
    ("dice_smooth", "Dice smoothing constant"),
    ("normalize_entropy", "divide voxel entropy by ln M (true/false)"),
    ("total_steps", "number of training steps"),
    ("labeled_per_batch", "labeled items per batch"),
    ("unlabeled_per_batch", "unlabeled items per batch"),
    ("lr0", "initial learning rate"),
    ("lr_period", "learning rate is divided by 10 every lr_period steps"),
    ("ema_alpha", "teacher EMA decay in [0,1)"),
    ("mc_samples", "teacher MC dropout passes T (>= 2)"),
    ("seed", "root random seed"),
    ("mode", "paper | supervised | mse_ablation | no_weight_ablation"),
    ("noise_sigma", "std of teacher input noise"),
    ("noise_clip", "clip of teacher input noise"),
    ("student_dropout", "dropout active in the student training forward (true/false)"),
    ("threads", "worker threads (0 = default)"),
    ("data_dir", "dataset directory"),
    ("out_dir", "output directory"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, l, t) = (&mut self.model, &mut self.loss, &mut self.train);
        match key.trim() {
            "in_channels" => m.in_channels = parse(key, v)?,
            "base_channels" => m.base_channels = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "dropout_p" => m.dropout_p = parse(key, v)?,
            "tap_layer" => m.tap_layer = TapLayer::from_str(v)?,
            "beta" => l.beta = parse(key, v)?,
            "eps_u" => l.eps_u = parse(key, v)?,
            "eps_f" => l.eps_f = parse(key, v)?,
            "ramp_len" => l.ramp_len = parse(key, v)?,
            "omega_max" => l.omega_max = parse(key, v)?,
            "dice_smooth" => l.dice_smooth = parse(key, v)?,
            "normalize_entropy" => l.normalize_entropy = parse(key, v)?,
            "total_steps" => t.total_steps = parse(key, v)?,
            "labeled_per_batch" => t.labeled_per_batch = parse(key, v)?,
            "unlabeled_per_batch" => t.unlabeled_per_batch = parse(key, v)?,
            "lr0" => t.lr0 = parse(key, v)?,
            "lr_period" => t.lr_period = parse(key, v)?,
            "ema_alpha" => t.ema_alpha = parse(key, v)?,
            "mc_samples" => t.mc_samples = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "mode" => t.mode = ConsistencyMode::from_str(v)?,
            "noise_sigma" => t.noise.sigma = parse(key, v)?,
            "noise_clip" => t.noise.clip = parse(key, v)?,
            "student_dropout" => t.student_dropout = parse(key, v)?,
            "threads" => t.threads = parse(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let (m, l, t) = (&self.model, &self.loss, &self.train);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            m.in_channels.to_string(),
            m.base_channels.to_string(),
            m.num_classes.to_string(),
            m.dropout_p.to_string(),
            m.tap_layer.as_str().to_string(),
            l.beta.to_string(),
            l.eps_u.to_string(),
            l.eps_f.to_string(),
            l.ramp_len.to_string(),
            l.omega_max.to_string(),
            l.dice_smooth.to_string(),
            l.normalize_entropy.to_string(),
            t.total_steps.to_string(),
            t.labeled_per_batch.to_string(),
            t.unlabeled_per_batch.to_string(),
            t.lr0.to_string(),
            t.lr_period.to_string(),
            t.ema_alpha.to_string(),
            t.mc_samples.to_string(),
            t.seed.to_string(),
            t.mode.as_str().to_string(),
            t.noise.sigma.to_string(),
            t.noise.clip.to_string(),
            t.student_dropout.to_string(),
            t.threads.to_string(),
            path(&self.data_dir),
            path(&self.out_dir),
        ];
        let mut out = String::new();
        for ((key, _), value) in KEYS.iter().zip(values) {
            if value.is_empty() {
                continue;
            }
            writeln!(out, "{key} = {value}").expect("write to String");
        }
        out
    }
}
