//! Rate-distortion training: schedules, loss, Adam and the image pipeline.

mod fit;
mod optimize;

pub use fit::{train_fit, train_image, FitTarget, TrainedNetwork};
pub(crate) use fit::mse_and_grad;
pub use optimize::{optimize, StepEval};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::MediaError;
use crate::quant::QuantError;
use crate::siren::SirenError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step} outside schedule of {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training diverged at step {step} (loss {loss}) after one learning-rate halving")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Siren(#[from] SirenError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Media(#[from] MediaError),
}

/// Which pixels enter the loss at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Batch {
    #[default]
    Full,
    /// A fresh seeded random subset of this many pixels per step.
    Random(usize),
}

fn default_quant_lr_scale() -> f64 {
    QUANT_LR_SCALE
}

fn default_log_every() -> usize {
    100
}

/// Multiplier from the weight learning rate to the learning rate of the
/// log-scale quantizer parameters.
pub const QUANT_LR_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub batch: Batch,
    #[serde(default)]
    pub seed: u64,
    /// Learning rate of `ln s` and `ln theta_max`, relative to the weights'.
    #[serde(default = "default_quant_lr_scale")]
    pub quant_lr_scale: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

/// Preset names with their step counts and learning rates.
pub const PRESETS: [(&str, usize, f64, f64); 9] = [
    ("initial-iframe", 180_000, 1e-4, 1e-5),
    ("other-iframe", 80_000, 1e-4, 1e-5),
    ("initial-flow", 20_000, 1e-4, 1e-5),
    ("initial-flow-quant", 3_000, 5e-6, 1e-6),
    ("other-flow-quant", 20_000, 1e-4, 1e-6),
    ("residual-training", 20_000, 1e-4, 1e-5),
    ("residual-quant", 3_000, 2e-5, 1e-7),
    ("image-pretrain", 100_000, 1e-4, 5e-6),
    ("image-qat", 25_000, 2e-5, 2e-5),
];

/// Rate weight for low-rate working points.
pub const BETA_LOW_RATE: f64 = 1e-4;
/// Rate weight for high-rate working points.
pub const BETA_HIGH_RATE: f64 = 3e-5;

impl TrainConfig {
    pub fn new(steps: usize, lr_initial: f64, lr_final: f64) -> Self {
        TrainConfig {
            steps,
            lr_initial,
            lr_final,
            beta: 0.0,
            batch: Batch::Full,
            seed: 0,
            quant_lr_scale: QUANT_LR_SCALE,
            log_every: default_log_every(),
        }
    }

    /// A named schedule. Video stages use `beta = 1e-4`; `image-qat` too.
    pub fn preset(name: &str) -> Result<Self, TrainError> {
        let (_, steps, lr_i, lr_f) = PRESETS
            .iter()
            .find(|p| p.0 == name)
            .ok_or_else(|| TrainError::UnknownPreset(name.to_string()))?;
        let mut cfg = TrainConfig::new(*steps, *lr_i, *lr_f);
        if name != "image-pretrain" {
            cfg.beta = BETA_LOW_RATE;
        }
        Ok(cfg)
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Scales the step count by `factor`, keeping at least one step.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.steps = ((self.steps as f64 * factor).round() as usize).max(1);
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.lr_final > self.lr_initial {
            return bad("lr_final must not exceed lr_initial");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and nonnegative");
        }
        if !(self.quant_lr_scale > 0.0 && self.quant_lr_scale.is_finite()) {
            return bad("quant_lr_scale must be positive");
        }
        if self.batch == Batch::Random(0) {
            return bad("random batch size must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetFile {
    #[serde(default)]
    presets: BTreeMap<String, TrainConfig>,
}

/// Built-in presets overlaid with the `[presets.<name>]` tables of a TOML
/// document. Every entry is validated.
pub fn load_presets(toml_text: &str) -> Result<BTreeMap<String, TrainConfig>, TrainError> {
    let mut out: BTreeMap<String, TrainConfig> = PRESETS
        .iter()
        .map(|p| Ok((p.0.to_string(), TrainConfig::preset(p.0)?)))
        .collect::<Result<_, TrainError>>()?;
    let file: PresetFile = toml::from_str(toml_text)?;
    for (name, cfg) in file.presets {
        cfg.validate()?;
        out.insert(name, cfg);
    }
    Ok(out)
}

/// `lr_initial * (lr_final / lr_initial)^(step / steps)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.steps {
        return Err(TrainError::StepOutOfRange {
            step,
            steps: cfg.steps,
        });
    }
    let frac = step as f64 / cfg.steps as f64;
    Ok(cfg.lr_initial * (cfg.lr_final / cfg.lr_initial).powf(frac))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdLoss {
    pub loss: f64,
    pub distortion: f64,
    pub rate: f64,
}

/// `D + beta * R` with `D` the mean squared error over all entries and
/// `R` the mean bits per parameter.
pub fn rd_loss(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    rate: f64,
    beta: f64,
) -> Result<RdLoss, TrainError> {
    if pred.dim() != target.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len().max(1) as f64;
    let distortion = pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(RdLoss {
        loss: distortion + beta * rate,
        distortion,
        rate,
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Non-finite gradients leave both the
/// parameters and the state untouched.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// One logged point of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    #[serde(rename = "D")]
    pub distortion: f64,
    /// Integer payload bits per parameter; 0 before quantization.
    #[serde(rename = "R_bits_per_param")]
    pub rate: f64,
    #[serde(rename = "PSNR")]
    pub psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn append(&mut self, other: TrainLog, step_offset: usize) {
        self.rows.extend(other.rows.into_iter().map(|mut r| {
            r.step += step_offset;
            r
        }));
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}
