//! Fully connected pulse-time regressor with hand-written backpropagation.
//!
//! Inputs are the normalized current conductance and the normalized desired
//! change; the single linear output is the normalized signed pulse time.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Kind, Norm, Sample};
use crate::gtmap::SmoothedHistory;
use crate::seed::{derive_seed, rng_from_seed, stream};

pub const DEFAULT_LAYERS: [usize; 5] = [2, 32, 64, 32, 1];

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("rpd: {0}")]
    Rpd(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("{path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Multilayer perceptron with a scalar identity output.
///
/// `weights[l]` is row-major `layer_sizes[l+1] × layer_sizes[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Gradients (or optimizer state) shaped like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Grads {
            weights: mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| v.fill(0.0));
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Mlp {
    fn check_sizes(sizes: &[usize]) -> Result<(), NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Shape(format!("bad layer sizes {sizes:?}")));
        }
        if sizes[sizes.len() - 1] != 1 {
            return Err(NnError::Shape("output layer must have size 1".into()));
        }
        Ok(())
    }

    /// Uniform fan-in initialization: weights `U(±√(6/fan_in))` (He, for
    /// ReLU), biases `U(±1/√fan_in)`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self, NnError> {
        Self::check_sizes(sizes)?;
        let mut rng = rng_from_seed(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w_bound = (6.0 / fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-w_bound..w_bound)).collect());
            biases.push((0..fan_out).map(|_| rng.random_range(-bound..bound)).collect());
        }
        Ok(Mlp {
            layer_sizes: sizes.to_vec(),
            weights,
            biases,
            activation: Activation::Relu,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        let mut m = Self::new(sizes, 0)?;
        m.weights.iter_mut().chain(m.biases.iter_mut()).for_each(|v| v.fill(0.0));
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        Self::check_sizes(&self.layer_sizes)?;
        let layers = self.layer_sizes.len() - 1;
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(NnError::Shape("layer count mismatch".into()));
        }
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[l].len() != pair[0] * pair[1] || self.biases[l].len() != pair[1] {
                return Err(NnError::Shape(format!("layer {l} shape mismatch")));
            }
        }
        if !self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite()) {
            return Err(NnError::Shape("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn forward(&self, input: &[f64]) -> f64 {
        let mut trace = Trace::default();
        self.forward_trace(input, &mut trace)
    }

    /// Normalized pulse time for normalized `(G, ΔG)`.
    pub fn predict(&self, g_norm: f64, delta_g_norm: f64) -> f64 {
        self.forward(&[g_norm, delta_g_norm])
    }

    pub fn forward_trace(&self, input: &[f64], trace: &mut Trace) -> f64 {
        let layers = self.weights.len();
        trace.pre.resize(layers, Vec::new());
        trace.post.resize(layers + 1, Vec::new());
        trace.post[0].clear();
        trace.post[0].extend_from_slice(input);
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.weights[l];
            let (before, after) = trace.post.split_at_mut(l + 1);
            let a_in = &before[l];
            let z = &mut trace.pre[l];
            z.clear();
            z.extend((0..n_out).map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                self.biases[l][o] + row.iter().zip(a_in).map(|(w, a)| w * a).sum::<f64>()
            }));
            let a_out = &mut after[0];
            a_out.clear();
            if l + 1 == layers {
                a_out.extend_from_slice(z);
            } else {
                a_out.extend(z.iter().map(|&v| self.activation.apply(v)));
            }
        }
        trace.post[layers][0]
    }

    /// Accumulate `d_out · ∂output/∂θ` into `grads`, using a trace from
    /// [`Mlp::forward_trace`] on the same input.
    pub fn backward_trace(&self, trace: &mut Trace, d_out: f64, grads: &mut Grads) {
        let layers = self.weights.len();
        trace.delta.clear();
        trace.delta.push(d_out);
        for l in (0..layers).rev() {
            let n_in = self.layer_sizes[l];
            let a_in = &trace.post[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in trace.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads.biases[l][o] += d;
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                row.iter_mut().zip(a_in).for_each(|(g, a)| *g += d * a);
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            trace.delta_prev.clear();
            trace.delta_prev.resize(n_in, 0.0);
            for (o, &d) in trace.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                trace.delta_prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            trace
                .delta_prev
                .iter_mut()
                .zip(&trace.pre[l - 1])
                .for_each(|(p, &z)| *p *= self.activation.derivative(z));
            std::mem::swap(&mut trace.delta, &mut trace.delta_prev);
        }
    }

    /// Mean squared error over `batch` and its exact gradient.
    pub fn mse_gradients(&self, batch: &[([f64; 2], f64)]) -> (f64, Grads) {
        let mut grads = Grads::zeros_like(self);
        let mut trace = Trace::default();
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for (x, y) in batch {
            let out = self.forward_trace(x, &mut trace);
            let err = out - y;
            loss += err * err * scale;
            self.backward_trace(&mut trace, 2.0 * err * scale, &mut grads);
        }
        (loss, grads)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }
}

/// Minibatch SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Grads,
}

impl Sgd {
    pub fn new(mlp: &Mlp, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Grads::zeros_like(mlp),
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Grads) {
        let params = mlp.weights.iter_mut().chain(mlp.biases.iter_mut());
        let vel = self.velocity.weights.iter_mut().chain(self.velocity.biases.iter_mut());
        let grad = grads.weights.iter().chain(&grads.biases);
        for ((p, v), g) in params.zip(vel).zip(grad) {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= self.learning_rate * *v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpdReport {
    pub mean_rpd: f64,
    pub per_trial_rpd: Vec<f64>,
    pub frac_within_50pct: f64,
    /// Trials dropped because their target was not positive.
    pub excluded: usize,
}

/// Relative percentage difference: `mean(|out − tgt| / tgt)` over trials
/// with a positive target. Non-positive targets are excluded and counted.
pub fn rpd(outputs: &[f64], targets: &[f64]) -> Result<RpdReport, NnError> {
    if outputs.len() != targets.len() {
        return Err(NnError::Rpd(format!(
            "length mismatch: {} outputs, {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let mut per_trial = Vec::with_capacity(outputs.len());
    let mut excluded = 0;
    for (&o, &t) in outputs.iter().zip(targets) {
        if t > 0.0 {
            per_trial.push((o - t).abs() / t);
        } else {
            excluded += 1;
        }
    }
    if per_trial.is_empty() {
        return Err(NnError::Rpd("no trial with a positive target".into()));
    }
    if excluded > 0 {
        log::warn!("rpd: excluded {excluded} trial(s) with non-positive target");
    }
    let n = per_trial.len() as f64;
    let mean_rpd = per_trial.iter().sum::<f64>() / n;
    let frac_within_50pct = per_trial.iter().filter(|&&r| r < 0.5).count() as f64 / n;
    Ok(RpdReport {
        mean_rpd,
        per_trial_rpd: per_trial,
        frac_within_50pct,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointMetric {
    /// RPD on normalized pulse times.
    #[serde(rename = "t")]
    RpdT,
    /// RPD on conductances, mapping predicted times through recorded histories.
    #[serde(rename = "g")]
    RpdG,
}

impl std::str::FromStr for CheckpointMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "t" => Ok(CheckpointMetric::RpdT),
            "g" => Ok(CheckpointMetric::RpdG),
            other => Err(format!("unknown checkpoint metric {other:?} (expected t or g)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Supplied by the caller's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub checkpoint_metric: CheckpointMetric,
    pub layer_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
            checkpoint_metric: CheckpointMetric::RpdT,
            layer_sizes: DEFAULT_LAYERS.to_vec(),
        }
    }
}

impl TrainConfig {
    /// The untrained network `train` starts from.
    pub fn initial_model(&self) -> Result<Mlp, NnError> {
        let base = derive_seed(self.seed, &[stream::TRAIN]);
        Mlp::new(&self.layer_sizes, derive_seed(base, &[0]))
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 {
            return Err(NnError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(NnError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn sample_input(sample: &Sample, norm: &Norm) -> [f64; 2] {
    [norm.g(sample.g_start), norm.g(sample.delta_g())]
}

/// Validation metrics of `mlp` on `samples`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub rpd_t: f64,
    pub rpd_g: f64,
    pub frac_g_within_50pct: f64,
}

impl ValMetrics {
    pub fn get(&self, metric: CheckpointMetric) -> f64 {
        match metric {
            CheckpointMetric::RpdT => self.rpd_t,
            CheckpointMetric::RpdG => self.rpd_g,
        }
    }
}

/// RPD in t-space (normalized times) and in G-space (predicted time mapped
/// through each sample's own raw history).
pub fn evaluate<'a>(
    mlp: &Mlp,
    samples: impl IntoIterator<Item = &'a Sample>,
    norm: &Norm,
) -> Result<ValMetrics, NnError> {
    let (mut t_out, mut t_tgt, mut g_out, mut g_tgt) = (vec![], vec![], vec![], vec![]);
    for s in samples {
        let pred = mlp.forward(&sample_input(s, norm));
        t_out.push(pred);
        t_tgt.push(norm.t(s.t_pulse));
        let raw = SmoothedHistory::raw(&s.history);
        g_out.push(norm.denormalize(raw.map_t_to_g(pred, norm), Kind::G));
        g_tgt.push(s.g_target);
    }
    let rt = rpd(&t_out, &t_tgt)?;
    let rg = rpd(&g_out, &g_tgt)?;
    Ok(ValMetrics {
        rpd_t: rt.mean_rpd,
        rpd_g: rg.mean_rpd,
        frac_g_within_50pct: rg.frac_within_50pct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the untrained network.
    pub epoch: usize,
    pub train_mse: f64,
    pub val: ValMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub metric: CheckpointMetric,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochLog {
        &self.epochs[self.best_epoch]
    }
}

/// Minibatch SGD on normalized `(g_start, δG) → t_norm` with MSE loss.
/// Returns the epoch checkpoint with the best validation metric.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, TrainHistory), NnError> {
    cfg.validate()?;
    if dataset.split.train.is_empty() || dataset.split.val.is_empty() {
        return Err(NnError::Config("dataset needs non-empty train and val splits".into()));
    }
    let norm = &dataset.norm;
    let base = derive_seed(cfg.seed, &[stream::TRAIN]);
    let mut mlp = cfg.initial_model()?;
    let mut shuffle_rng = rng_from_seed(derive_seed(base, &[1]));
    let data: Vec<([f64; 2], f64)> = dataset
        .train()
        .map(|s| (sample_input(s, norm), norm.t(s.t_pulse)))
        .collect();

    let mut opt = Sgd::new(&mlp, cfg.learning_rate, cfg.momentum);
    let mut grads = Grads::zeros_like(&mlp);
    let mut trace = Trace::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    let initial = evaluate(&mlp, dataset.val(), norm)?;
    let mut history = TrainHistory {
        epochs: vec![EpochLog {
            epoch: 0,
            train_mse: data.iter().map(|(x, y)| (mlp.forward(x) - y).powi(2)).sum::<f64>()
                / data.len() as f64,
            val: initial,
        }],
        best_epoch: 0,
        metric: cfg.checkpoint_metric,
    };
    let mut best: Option<(f64, Mlp)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = &data[i];
                let err = mlp.forward_trace(x, &mut trace) - y;
                loss_sum += err * err;
                mlp.backward_trace(&mut trace, 2.0 * err * scale, &mut grads);
            }
            opt.step(&mut mlp, &grads);
        }
        let train_mse = loss_sum / data.len() as f64;
        if !train_mse.is_finite() || !mlp.is_finite() {
            return Err(NnError::Diverged {
                epoch,
                loss: train_mse,
            });
        }
        let val = evaluate(&mlp, dataset.val(), norm)?;
        let score = val.get(cfg.checkpoint_metric);
        log::debug!("train epoch {epoch}: mse {train_mse:.3e} val {val:?}");
        history.epochs.push(EpochLog {
            epoch,
            train_mse,
            val,
        });
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, mlp.clone()));
            history.best_epoch = epoch;
        }
    }
    let (_, best_mlp) = best.expect("at least one epoch");
    Ok((best_mlp, history))
}

/// Persisted model: parameters plus everything needed to use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
    pub norm: Norm,
    pub provenance: serde_json::Value,
}

impl Checkpoint {
    pub fn new(mlp: &Mlp, norm: Norm, provenance: serde_json::Value) -> Self {
        Checkpoint {
            layer_sizes: mlp.layer_sizes.clone(),
            weights: mlp.weights.clone(),
            biases: mlp.biases.clone(),
            activation: mlp.activation,
            norm,
            provenance,
        }
    }

    pub fn mlp(&self) -> Result<Mlp, NnError> {
        let mlp = Mlp {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            activation: self.activation,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let err = |reason: String| NnError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let json = serde_json::to_vec_pretty(self).map_err(|e| err(e.to_string()))?;
        fs::write(path, json).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let err = |reason: String| NnError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let raw = fs::read(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_slice(&raw).map_err(|e| err(e.to_string()))?;
        ck.mlp().map_err(|e| err(e.to_string()))?;
        ck.norm.validate().map_err(|e| err(e.to_string()))?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: explicit matrix chain on a [2,3,2,1] network.
    #[test]
    fn forward_matches_hand_computation() {
        let mlp = Mlp {
            layer_sizes: vec![2, 3, 2, 1],
            weights: vec![
                vec![0.5, -1.0, 0.25, 0.75, -0.5, 2.0],
                vec![1.0, -1.0, 0.5, 0.3, 0.2, -0.4],
                vec![1.5, -2.0],
            ],
            biases: vec![vec![0.1, 0.0, -0.2], vec![0.05, 0.1], vec![0.3]],
            activation: Activation::Relu,
        };
        let x = [0.4, 0.2];
        // Layer 1: z = [0.2-0.2+0.1, 0.1+0.15, -0.2+0.4-0.2] = [0.1, 0.25, 0.0]
        let h1 = [0.1_f64, 0.25, 0.0];
        // Layer 2: z = [0.1-0.25+0+0.05, 0.03+0.05-0+0.1] = [-0.1, 0.18] -> relu [0, 0.18]
        let h2 = [0.0_f64, 0.18];
        let expected = 1.5 * h2[0] - 2.0 * h2[1] + 0.3;
        assert!((mlp.forward(&x) - expected).abs() < 1e-12);
        assert!((h1[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(&DEFAULT_LAYERS).unwrap();
        assert_eq!(mlp.predict(0.3, -0.7), 0.0);
        let (_, g) = mlp.mse_gradients(&[([0.1, 0.2], 0.0)]);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Mlp::new(&DEFAULT_LAYERS, 9).unwrap();
        let b = Mlp::new(&DEFAULT_LAYERS, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.predict(0.5, 0.1), b.predict(0.5, 0.1));
    }

    #[test]
    fn gradients_vanish_at_exact_fit() {
        let mlp = Mlp::new(&[2, 4, 4, 1], 3).unwrap();
        let batch: Vec<_> = [[0.1, 0.5], [0.7, -0.3]]
            .into_iter()
            .map(|x| (x, mlp.forward(&x)))
            .collect();
        let (loss, g) = mlp.mse_gradients(&batch);
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_same_mean_gradient() {
        let mlp = Mlp::new(&[2, 4, 4, 1], 4).unwrap();
        let batch = vec![([0.2, 0.4], 0.3), ([0.9, -0.2], 0.8), ([0.5, 0.5], 0.1)];
        let doubled: Vec<_> = batch.iter().flat_map(|b| [*b, *b]).collect();
        let (_, g1) = mlp.mse_gradients(&batch);
        let (_, g2) = mlp.mse_gradients(&doubled);
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rpd_examples() {
        let r = rpd(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.mean_rpd, r.frac_within_50pct), (0.0, 1.0));
        let r = rpd(&[150.0], &[100.0]).unwrap();
        assert_eq!(r.per_trial_rpd, vec![0.5]);
        // exactly 50 % is not "within"
        assert_eq!(r.frac_within_50pct, 0.0);
        let outs = [120.0, 80.0, 300.0];
        let tgts = [100.0, 90.0, 200.0];
        let a = rpd(&outs, &tgts).unwrap();
        let b = rpd(&outs.map(|v| v * 3.5), &tgts.map(|v| v * 3.5)).unwrap();
        assert!((a.mean_rpd - b.mean_rpd).abs() < 1e-15);
        assert_eq!(a.frac_within_50pct, b.frac_within_50pct);
    }

    #[test]
    fn rpd_excludes_non_positive_targets() {
        let r = rpd(&[1.0, 5.0, 2.0], &[0.0, -1.0, 2.0]).unwrap();
        assert_eq!(r.excluded, 2);
        assert_eq!(r.per_trial_rpd.len(), 1);
        assert!(rpd(&[1.0], &[0.0]).is_err());
        assert!(rpd(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!("g".parse::<CheckpointMetric>().is_ok());
        assert!("x".parse::<CheckpointMetric>().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mlp = Mlp::new(&DEFAULT_LAYERS, 1).unwrap();
        let norm = Norm {
            g_ref: 400.0,
            t_ref: 1e4,
        };
        let ck = Checkpoint::new(&mlp, norm, serde_json::json!({"seed": 1}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.mlp().unwrap(), mlp);
        fs::write(&path, b"{").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("m.json"));
    }
}
