//! Mean Teacher training with double-uncertainty weighting.
//!
//! One step: MC-dropout the teacher on every batch item, estimate voxel,
//! structure and feature uncertainty, run the student, combine supervised
//! and consistency losses, take an SGD step and fold the student into the
//! teacher by EMA.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{BatchIter, Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::metrics::{self, MaskRef, MetricsReport, SampleMetrics};
use crate::rng::{stream_id, StreamKey};
use crate::segnet::{Mode, Model, ModelConfig, NoiseSpec};
use crate::tensor::Tensor;
use crate::uncertainty;

const TAG_MODEL: u64 = 0x4d4f_4445;
const TAG_BATCH: u64 = 0x4241_5443;
const TAG_TEACHER: u64 = 0x5445_4143;
const TAG_STUDENT: u64 = 0x5354_5544;

/// Which consistency term is used, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Uncertainty-modified teacher target, weighted by `λ = -(ω/U_f) log U_s`.
    Paper,
    /// Labeled data only; the teacher is still updated but never sampled.
    Supervised,
    /// Plain MSE between student and teacher probabilities, weighted by `ω`.
    MseAblation,
    /// Uncertainty-modified target, weighted by `ω` alone.
    NoWeightAblation,
}

impl ConsistencyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Supervised => "supervised",
            Self::MseAblation => "mse_ablation",
            Self::NoWeightAblation => "no_weight_ablation",
        }
    }

    fn uses_teacher(self) -> bool {
        self != Self::Supervised
    }
}

impl FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "paper" => Self::Paper,
            "supervised" => Self::Supervised,
            "mse_ablation" => Self::MseAblation,
            "no_weight_ablation" => Self::NoWeightAblation,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub lr0: f32,
    /// The learning rate drops tenfold every `lr_period` steps.
    pub lr_period: usize,
    pub ema_alpha: f64,
    /// Teacher MC dropout passes per item.
    pub mc_samples: usize,
    pub seed: u64,
    pub mode: ConsistencyMode,
    pub noise: NoiseSpec,
    pub student_dropout: bool,
    /// Worker threads; 0 uses `DUWMT_THREADS` or the rayon default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            lr0: 0.01,
            lr_period: 800,
            ema_alpha: 0.99,
            mc_samples: 16,
            seed: 0,
            mode: ConsistencyMode::Paper,
            noise: NoiseSpec::default(),
            student_dropout: true,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_per_batch == 0 {
            return Err(Error::Config("labeled_per_batch must be >= 1".into()));
        }
        if self.mode.uses_teacher() && self.mc_samples < 2 {
            return Err(Error::Config(format!("mc_samples must be >= 2, got {}", self.mc_samples)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.lr_period == 0 {
            return Err(Error::Config("lr_period must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha must be in [0,1), got {}", self.ema_alpha)));
        }
        if !(self.noise.sigma >= 0.0 && self.noise.clip >= 0.0) {
            return Err(Error::Config("noise sigma and clip must be >= 0".into()));
        }
        Ok(())
    }

    /// Unlabeled items drawn per step for this mode.
    pub fn unlabeled_in_batch(&self) -> usize {
        if self.mode.uses_teacher() {
            self.unlabeled_per_batch
        } else {
            0
        }
    }

    /// `lr0 / 10^floor(step / lr_period)`.
    pub fn learning_rate(&self, step: usize) -> f32 {
        let drops = (step / self.lr_period.max(1)) as i32;
        (self.lr0 as f64 / 10f64.powi(drops)) as f32
    }
}

/// Everything that defines a training run apart from the data.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub l_s: f32,
    pub l_c: Option<f32>,
    pub lambda: f32,
    /// Batch means; absent when the teacher is not sampled.
    pub u_s: Option<f32>,
    pub u_f: Option<f32>,
    /// Mean Dice of the MC-averaged teacher prediction on the labeled items.
    pub teacher_dice: Option<f64>,
    /// Mean Dice of the student training prediction on the labeled items.
    pub student_dice: f64,
}

pub struct TrainState {
    pub student: Model,
    pub teacher: Model,
    pub step: usize,
}

impl TrainState {
    /// Student from `seed`; the teacher starts as an exact copy.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let student = Model::build(config.clone(), stream_id(&[TAG_MODEL, seed]))?;
        Ok(Self { teacher: student.clone(), student, step: 0 })
    }
}

/// `θ' <- α θ' + (1 - α) θ`, parameter by parameter.
/// Computed in f64 and rounded once per parameter.
pub fn ema_update(teacher: &mut Model, student: &Model, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("ema alpha must be in [0,1], got {alpha}")));
    }
    if teacher.params().len() != student.params().len() {
        return Err(Error::shape("ema_update", "parameter count differs"));
    }
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        if t.value.shape() != s.value.shape() || t.name != s.name {
            return Err(Error::shape("ema_update", format!("{} vs {}", t.name, s.name)));
        }
        for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = (alpha * *a as f64 + (1.0 - alpha) * b as f64) as f32;
        }
    }
    Ok(())
}

/// Per-voxel argmax over the class axis of `(M,H,W)` probabilities; ties go
/// to the lower class.
pub fn hard_labels(probs: &Tensor) -> Vec<u8> {
    let (m, hw) = (probs.shape()[0], probs.len() / probs.shape()[0]);
    let d = probs.data();
    (0..hw)
        .map(|v| {
            let mut best = 0;
            for c in 1..m {
                if d[c * hw + v] > d[best * hw + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn mask_dice(probs: &Tensor, mask: &[u8]) -> Result<f64> {
    let (h, w) = (probs.shape()[1], probs.shape()[2]);
    let pred = hard_labels(probs);
    metrics::dice(&MaskRef::new(&pred, h, w)?, &MaskRef::new(mask, h, w)?)
}

struct TeacherView {
    mean: Tensor,
    u_v: Tensor,
    u_s: f32,
    u_f: f32,
}

/// Runs one optimisation step on the given items and advances `state.step`.
pub fn train_step(
    state: &mut TrainState,
    exp: &Experiment,
    labeled: &[&SampleRecord],
    unlabeled: &[&SampleRecord],
) -> Result<StepLog> {
    let (tc, lc) = (&exp.train, &exp.loss);
    let step = state.step;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("train_step: labeled batch is empty".into()));
    }
    let masks: Vec<&[u8]> = labeled
        .iter()
        .map(|s| s.mask.as_deref().ok_or_else(|| Error::InvalidArgument(format!("sample `{}` has no mask", s.id))))
        .collect::<Result<_>>()?;
    let items: Vec<&SampleRecord> = labeled.iter().chain(unlabeled).copied().collect();
    let diverged = |e: Error| match e {
        Error::NonFinite { .. } => Error::NumericDivergence { step },
        other => other,
    };

    let teacher: Option<Vec<TeacherView>> = if tc.mode.uses_teacher() {
        let views = items
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let key = StreamKey::new(tc.seed, stream_id(&[TAG_TEACHER, step as u64, i as u64]));
                let samples = state.teacher.mc_sample(&s.image, tc.mc_samples, key, tc.noise)?;
                let bundle = uncertainty::estimate(&samples, lc.normalize_entropy)?;
                let mean = uncertainty::mean_probs(samples.probs())?;
                Ok(TeacherView { mean, u_v: bundle.u_v_map, u_s: bundle.u_s, u_f: bundle.u_f })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(diverged)?;
        Some(views)
    } else {
        None
    };

    let mut g = Graph::new();
    let params = state.student.bind(&mut g, true);
    let mut student_probs = Vec::with_capacity(items.len());
    for (i, s) in items.iter().enumerate() {
        let x = g.constant(s.image.clone());
        let mode = if tc.student_dropout {
            Mode::Stochastic(StreamKey::new(tc.seed, stream_id(&[TAG_STUDENT, step as u64, i as u64])))
        } else {
            Mode::Deterministic
        };
        let out = state.student.forward_graph(&mut g, &params, x, mode).map_err(diverged)?;
        student_probs.push(g.softmax_channel(out.logits).map_err(diverged)?);
    }

    let mean_of = |g: &mut Graph, terms: Vec<Var>| -> Result<Var> {
        let n = terms.len() as f32;
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        g.scalar_mul(acc, 1.0 / n)
    };

    let sup_terms = labeled
        .iter()
        .enumerate()
        .map(|(i, _)| losses::supervised_loss(&mut g, student_probs[i], masks[i], lc))
        .collect::<Result<Vec<_>>>()
        .map_err(diverged)?;
    let l_s = mean_of(&mut g, sup_terms).map_err(diverged)?;

    let omega = losses::rampup_weight(step, lc.ramp_len, lc.omega_max as f64);
    let (l_c, lambda, u_s, u_f) = match &teacher {
        None => (None, 0.0, None, None),
        Some(views) => {
            let mut terms = Vec::with_capacity(items.len());
            for (view, &sp) in views.iter().zip(&student_probs) {
                let term = match tc.mode {
                    ConsistencyMode::MseAblation => losses::mse_consistency(&mut g, sp, &view.mean),
                    _ => losses::modify_teacher(&mut g, &view.mean, sp, &view.u_v)
                        .and_then(|tp| losses::consistency_loss(&mut g, tp, sp, &view.u_v, lc.beta, lc.eps_u)),
                }
                .map_err(diverged)?;
                terms.push(term);
            }
            let n = views.len() as f64;
            let u_s = views.iter().map(|v| v.u_s as f64).sum::<f64>() / n;
            let u_f = views.iter().map(|v| v.u_f as f64).sum::<f64>() / n;
            let lambda = match tc.mode {
                ConsistencyMode::Paper => {
                    losses::double_uncertainty_weight(omega, u_f, u_s, lc.eps_f as f64, lc.eps_u as f64)
                }
                _ => omega,
            };
            (Some(mean_of(&mut g, terms).map_err(diverged)?), lambda as f32, Some(u_s as f32), Some(u_f as f32))
        }
    };

    let total = losses::total_loss(&mut g, Some(l_s), l_c, lambda).map_err(diverged)?;
    let loss = g.value(total).item();
    if !loss.is_finite() {
        return Err(Error::NumericDivergence { step });
    }
    let log_l_s = g.value(l_s).item();
    let log_l_c = l_c.map(|v| g.value(v).item());
    let student_dice =
        labeled.iter().enumerate().map(|(i, _)| mask_dice(g.value(student_probs[i]), masks[i])).sum::<Result<f64>>()?
            / labeled.len() as f64;
    let teacher_dice = match &teacher {
        Some(views) => Some(
            views.iter().zip(&masks).map(|(v, m)| mask_dice(&v.mean, m)).sum::<Result<f64>>()? / labeled.len() as f64,
        ),
        None => None,
    };

    g.backward(total).map_err(diverged)?;
    let grads = state.student.grads(&g, &params)?;
    drop(g);
    let lr = tc.learning_rate(step);
    state.student.sgd_step(&grads, lr).map_err(diverged)?;
    ema_update(&mut state.teacher, &state.student, tc.ema_alpha)?;
    state.step += 1;

    Ok(StepLog { step, lr, loss, l_s: log_l_s, l_c: log_l_c, lambda, u_s, u_f, teacher_dice, student_dice })
}

/// Deterministic-pass metrics of `model` on the test partition.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<MetricsReport> {
    let (h, w) = (dataset.manifest.height, dataset.manifest.width);
    let tests: Vec<&SampleRecord> = dataset.test().collect();
    if tests.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test samples".into()));
    }
    let per_sample = tests
        .par_iter()
        .map(|s| {
            let probs = model.predict_probs(&s.image)?;
            let pred = hard_labels(&probs);
            let gt = s.mask.as_deref().ok_or_else(|| Error::Config(format!("test sample `{}` has no mask", s.id)))?;
            SampleMetrics::compute(s.id.clone(), &MaskRef::new(&pred, h, w)?, &MaskRef::new(gt, h, w)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(per_sample))
}

/// Means of a logged quantity over the first and last tenth of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub early: f64,
    pub late: f64,
}

impl Trend {
    fn of(logs: &[StepLog], f: impl Fn(&StepLog) -> Option<f64>) -> Option<Self> {
        let n = (logs.len() / 10).max(1);
        if logs.len() < 2 {
            return None;
        }
        let mean = |part: &[StepLog]| -> Option<f64> {
            let v: Vec<f64> = part.iter().filter_map(&f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(Self { early: mean(&logs[..n])?, late: mean(&logs[logs.len() - n..])? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: ConsistencyMode,
    pub seed: u64,
    pub steps: usize,
    pub student: MetricsReport,
    pub teacher: MetricsReport,
    pub u_s: Option<Trend>,
    pub u_f: Option<Trend>,
    pub teacher_dice: Option<Trend>,
}

pub struct RunOutput {
    pub state: TrainState,
    pub logs: Vec<StepLog>,
    pub report: RunReport,
}

fn resolve_threads(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::env::var("DUWMT_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0)
}

/// Runs `f` inside a rayon pool of `threads` workers (0 = default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_threads(threads))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Full training run; `on_step` sees every log line as it is produced.
pub fn train(exp: &Experiment, dataset: &Dataset, mut on_step: impl FnMut(&StepLog) + Send) -> Result<RunOutput> {
    exp.validate()?;
    if exp.model.num_classes != dataset.manifest.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            exp.model.num_classes, dataset.manifest.num_classes
        )));
    }
    let tc = &exp.train;
    with_threads(tc.threads, || {
        let mut state = TrainState::new(&exp.model, tc.seed)?;
        let batches = BatchIter::new(
            &dataset.manifest,
            tc.labeled_per_batch,
            tc.unlabeled_in_batch(),
            stream_id(&[TAG_BATCH, tc.seed]),
        )?;
        let mut logs = Vec::with_capacity(tc.total_steps);
        for batch in batches.take(tc.total_steps) {
            let labeled = batch.labeled.iter().map(|id| dataset.sample(id)).collect::<Result<Vec<_>>>()?;
            let unlabeled = batch.unlabeled.iter().map(|id| dataset.sample(id)).collect::<Result<Vec<_>>>()?;
            let log = train_step(&mut state, exp, &labeled, &unlabeled)?;
            on_step(&log);
            logs.push(log);
        }
        let report = RunReport {
            mode: tc.mode,
            seed: tc.seed,
            steps: state.step,
            student: evaluate(&state.student, dataset)?,
            teacher: evaluate(&state.teacher, dataset)?,
            u_s: Trend::of(&logs, |l| l.u_s.map(f64::from)),
            u_f: Trend::of(&logs, |l| l.u_f.map(f64::from)),
            teacher_dice: Trend::of(&logs, |l| l.teacher_dice),
        };
        Ok(RunOutput { state, logs, report })
    })?
}
