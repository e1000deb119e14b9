//! Differentiable t→G lookup over recorded histories, and fine-tuning the
//! pulse predictor through it.
//!
//! A history is smoothed with a centered moving average, then treated as a
//! piecewise-linear function of signed pulse time. Its backward pass is
//! custom: inside the recorded range the local slope is clamped to `[0, 1]`;
//! outside it the value saturates but the gradient is exactly 1, so gradient
//! descent still pulls the predicted time back toward the recorded region.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, History, Kind, Norm};
use crate::nn::{evaluate, sample_input, Grads, Mlp, NnError, Sgd, Trace};
use crate::seed::{derive_seed, rng_from_seed, stream};

#[derive(Debug, Error)]
pub enum GtmapError {
    #[error("smoothing kernel must be odd and >= 1, got {0}")]
    Kernel(usize),
    #[error("invalid kernel schedule: {0}")]
    Schedule(String),
    #[error("invalid fine-tuning config: {0}")]
    Config(String),
    #[error("fine-tuning diverged in stage {stage} (kernel {kernel}), epoch {epoch}: loss {loss}")]
    Diverged {
        stage: usize,
        kernel: usize,
        epoch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Centered moving average. Windows are truncated at the edges to the
/// points that exist, so no values are invented.
pub fn smooth(values: &[f64], kernel: usize) -> Result<Vec<f64>, GtmapError> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(GtmapError::Kernel(kernel));
    }
    if kernel == 1 || values.is_empty() {
        return Ok(values.to_vec());
    }
    // Prefix sums of offsets from the first value keep constants exact.
    let base = values[0];
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in values {
        acc += v - base;
        prefix.push(acc);
    }
    let half = kernel / 2;
    let n = values.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            base + (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SmoothedHistory<'a> {
    pub history: &'a History,
    pub kernel: usize,
    pub g_smooth: Cow<'a, [f64]>,
}

impl<'a> SmoothedHistory<'a> {
    pub fn new(history: &'a History, kernel: usize) -> Result<Self, GtmapError> {
        let g_smooth = if kernel == 1 {
            Cow::Borrowed(history.g.as_slice())
        } else {
            Cow::Owned(smooth(&history.g, kernel)?)
        };
        Ok(Self {
            history,
            kernel,
            g_smooth,
        })
    }

    /// Kernel-1 view; borrows the recorded values.
    pub fn raw(history: &'a History) -> Self {
        Self {
            history,
            kernel: 1,
            g_smooth: Cow::Borrowed(history.g.as_slice()),
        }
    }

    fn len(&self) -> usize {
        self.g_smooth.len()
    }

    /// Smoothed G at position `j` when points are ordered by increasing
    /// signed time.
    fn g_at(&self, j: usize) -> f64 {
        match self.history.polarity.sign() > 0.0 {
            true => self.g_smooth[j],
            false => self.g_smooth[self.len() - 1 - j],
        }
    }

    /// Fractional position on the increasing-time grid.
    fn position(&self, t_norm: f64, norm: &Norm) -> f64 {
        let t = norm.denormalize(t_norm, Kind::T);
        let dt = self.history.dt;
        let t_lo = if self.history.polarity.sign() > 0.0 {
            0.0
        } else {
            -((self.len() - 1) as f64) * dt
        };
        let p = (t - t_lo) / dt;
        // Normalization round trips land a few ulps off grid nodes.
        let r = p.round();
        if (p - r).abs() < 1e-9 {
            r
        } else {
            p
        }
    }

    /// `(g_norm, raw_slope)` where `raw_slope` is `dg_norm/dt_norm` of the
    /// piecewise-linear map, right-hand at nodes, and `None` outside the
    /// recorded range.
    pub fn eval(&self, t_norm: f64, norm: &Norm) -> (f64, Option<f64>) {
        assert!(!self.g_smooth.is_empty(), "empty history");
        let n = self.len();
        let p = self.position(t_norm, norm);
        let last = (n - 1) as f64;
        if !(p >= 0.0) {
            return (norm.g(self.g_at(0)), None);
        }
        if p >= last {
            // The last node has no right-hand segment.
            return (norm.g(self.g_at(n - 1)), None);
        }
        let j = (p.floor() as usize).min(n - 2);
        let frac = p - j as f64;
        let (g0, g1) = (self.g_at(j), self.g_at(j + 1));
        let g = g0 + frac * (g1 - g0);
        // dg_norm/dt_norm = (Δg / g_ref) / (dt / (2 t_ref))
        let slope = (g1 - g0) / norm.g_ref * (2.0 * norm.t_ref / self.history.dt);
        (norm.g(g), Some(slope))
    }

    pub fn map_t_to_g(&self, t_norm: f64, norm: &Norm) -> f64 {
        self.eval(t_norm, norm).0
    }

    /// Custom backward: clamped slope inside, exactly 1 outside.
    pub fn map_t_to_g_grad(&self, t_norm: f64, norm: &Norm) -> f64 {
        custom_grad(self.eval(t_norm, norm).1)
    }

    /// Value and custom gradient in one lookup.
    pub fn forward_backward(&self, t_norm: f64, norm: &Norm) -> (f64, f64) {
        let (g, slope) = self.eval(t_norm, norm);
        (g, custom_grad(slope))
    }

    /// Total variation of the smoothed values.
    pub fn total_variation(&self) -> f64 {
        self.g_smooth.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }
}

fn custom_grad(slope: Option<f64>) -> f64 {
    match slope {
        Some(s) => s.clamp(0.0, 1.0),
        None => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub kernel: usize,
    pub epochs: usize,
}

/// Decreasing smoothing kernels, each trained for a number of epochs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Stage>", into = "Vec<Stage>")]
pub struct KernelSchedule {
    stages: Vec<Stage>,
}

impl KernelSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self, GtmapError> {
        if stages.is_empty() {
            return Err(GtmapError::Schedule("no stages".into()));
        }
        for s in &stages {
            if s.kernel == 0 || s.kernel % 2 == 0 {
                return Err(GtmapError::Schedule(format!("kernel {} is not odd", s.kernel)));
            }
            if s.epochs == 0 {
                return Err(GtmapError::Schedule(format!(
                    "kernel {} has zero epochs",
                    s.kernel
                )));
            }
        }
        if stages.windows(2).any(|w| w[1].kernel >= w[0].kernel) {
            return Err(GtmapError::Schedule("kernels must strictly decrease".into()));
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }
}

impl Default for KernelSchedule {
    fn default() -> Self {
        let stages = [1001, 101, 11, 1]
            .into_iter()
            .map(|kernel| Stage { kernel, epochs: 50 })
            .collect();
        Self::new(stages).expect("default schedule is valid")
    }
}

impl TryFrom<Vec<Stage>> for KernelSchedule {
    type Error = GtmapError;
    fn try_from(stages: Vec<Stage>) -> Result<Self, Self::Error> {
        Self::new(stages)
    }
}

impl From<KernelSchedule> for Vec<Stage> {
    fn from(s: KernelSchedule) -> Self {
        s.stages
    }
}

/// `"1001:50,101:50,11:50,1:50"`
impl FromStr for KernelSchedule {
    type Err = GtmapError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |part: &str| -> Option<Stage> {
            let (k, e) = part.trim().split_once(':')?;
            Some(Stage {
                kernel: k.trim().parse().ok()?,
                epochs: e.trim().parse().ok()?,
            })
        };
        let stages = s
            .split(',')
            .map(|p| parse(p).ok_or_else(|| GtmapError::Schedule(format!("cannot parse {p:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(stages)
    }
}

impl fmt::Display for KernelSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}:{}", s.kernel, s.epochs))
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub schedule: KernelSchedule,
    /// Zero freezes the weights; epochs still run and are logged.
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Supplied by the caller's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            schedule: KernelSchedule::default(),
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), GtmapError> {
        if self.batch_size == 0 {
            return Err(GtmapError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(GtmapError::Config("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GtmapError::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rpd_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub kernel: usize,
    pub epochs: Vec<StageEpoch>,
    pub best_epoch: usize,
    pub best_val_rpd_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHistory {
    pub initial_val_rpd_g: f64,
    pub stages: Vec<StageLog>,
    /// Stage whose checkpoint was returned; `None` means the input model.
    pub best_stage: Option<usize>,
    pub best_val_rpd_g: f64,
}

/// Custom-gradient loss of `mlp` on `(input, target g_norm, history)`
/// triples: returns the mean squared G error and accumulates its gradient.
pub fn g_space_mse_gradients(
    mlp: &Mlp,
    batch: &[([f64; 2], f64, &SmoothedHistory<'_>)],
    norm: &Norm,
    grads: &mut Grads,
) -> f64 {
    let mut trace = Trace::default();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut loss = 0.0;
    for (x, g_target, sh) in batch {
        let t = mlp.forward_trace(x, &mut trace);
        let (g, dg_dt) = sh.forward_backward(t, norm);
        let err = g - g_target;
        loss += err * err * scale;
        mlp.backward_trace(&mut trace, 2.0 * err * dg_dt * scale, grads);
    }
    loss
}

/// Fine-tune `mlp` on MSE between mapped and target conductance, one stage
/// per smoothing kernel. Each stage continues from the previous stage's best
/// checkpoint; validation always maps through the raw histories. Returns the
/// best checkpoint seen, including the input model itself.
pub fn finetune(
    mlp: &Mlp,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<(Mlp, FinetuneHistory), GtmapError> {
    cfg.validate()?;
    if dataset.split.train.is_empty() || dataset.split.val.is_empty() {
        return Err(GtmapError::Config("dataset needs non-empty train and val splits".into()));
    }
    let norm = &dataset.norm;
    let initial = evaluate(mlp, dataset.val(), norm)?.rpd_g;
    let mut best = (initial, mlp.clone(), None);
    let mut current = mlp.clone();
    let mut logs = Vec::new();
    let base = derive_seed(cfg.seed, &[stream::FINETUNE]);

    let train: Vec<_> = dataset.train().collect();
    for (stage_idx, stage) in cfg.schedule.stages().iter().enumerate() {
        let histories = train
            .iter()
            .map(|s| SmoothedHistory::new(&s.history, stage.kernel))
            .collect::<Result<Vec<_>, _>>()?;
        let data: Vec<([f64; 2], f64, &SmoothedHistory)> = train
            .iter()
            .zip(&histories)
            .map(|(s, h)| (sample_input(s, norm), norm.g(s.g_target), h))
            .collect();

        let mut rng = rng_from_seed(derive_seed(base, &[stage_idx as u64]));
        let mut opt = Sgd::new(&current, cfg.learning_rate, cfg.momentum);
        let mut grads = Grads::zeros_like(&current);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut log = StageLog {
            kernel: stage.kernel,
            epochs: Vec::new(),
            best_epoch: 0,
            best_val_rpd_g: f64::INFINITY,
        };
        let mut stage_best = current.clone();

        for epoch in 1..=stage.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| data[i]));
                grads.clear();
                let loss = g_space_mse_gradients(&current, &batch, norm, &mut grads);
                loss_sum += loss * chunk.len() as f64;
                opt.step(&mut current, &grads);
            }
            let train_loss = loss_sum / data.len() as f64;
            if !train_loss.is_finite() || current.validate().is_err() {
                return Err(GtmapError::Diverged {
                    stage: stage_idx,
                    kernel: stage.kernel,
                    epoch,
                    loss: train_loss,
                });
            }
            let val_rpd_g = evaluate(&current, dataset.val(), norm)?.rpd_g;
            log::debug!("finetune k={} epoch {epoch}: loss {train_loss:.3e} val rpd_g {val_rpd_g:.4}", stage.kernel);
            log.epochs.push(StageEpoch {
                epoch,
                train_loss,
                val_rpd_g,
            });
            if val_rpd_g < log.best_val_rpd_g {
                log.best_val_rpd_g = val_rpd_g;
                log.best_epoch = epoch;
                stage_best = current.clone();
            }
        }
        if log.best_val_rpd_g < best.0 {
            best = (log.best_val_rpd_g, stage_best.clone(), Some(stage_idx));
        }
        current = stage_best;
        logs.push(log);
    }

    let (best_val, best_mlp, best_stage) = best;
    Ok((
        best_mlp,
        FinetuneHistory {
            initial_val_rpd_g: initial,
            stages: logs,
            best_stage,
            best_val_rpd_g: best_val,
        },
    ))
}
