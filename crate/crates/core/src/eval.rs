//! Deployment in simulation: one-shot programming sweeps, write-and-verify
//! trajectories, and programming-delay comparison.
//!
//! Evaluations touch devices only through `read_conductance` and
//! `apply_pulse`.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceError, DeviceParams, DeviceState, Polarity};
use crate::nn::{rpd, NnError, RpdReport};
use crate::predictor::PulsePredictor;
use crate::seed::{derive_seed, rng_from_seed, stream};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictor `{predictor}` returned a non-finite pulse time for G = {g_now} µS, ΔG = {delta_g} µS")]
    NonFinitePrediction {
        predictor: String,
        g_now: f64,
        delta_g: f64,
    },
    #[error("unknown predictor `{0}` (available: {1})")]
    UnknownPredictor(String, String),
    #[error("evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Targets 100 / 220 / 340 µS on the default 50–400 µS range, mapped
/// affinely onto the configured range.
pub fn scaled_targets(params: &DeviceParams) -> Vec<f64> {
    [100.0, 220.0, 340.0]
        .iter()
        .map(|v| params.g_min_nominal + (v - 50.0) / 350.0 * params.range())
        .collect()
}

/// `n` evenly spaced points covering `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// The central `frac` of `[lo, hi]`.
pub fn central(lo: f64, hi: f64, frac: f64) -> (f64, f64) {
    let pad = 0.5 * (1.0 - frac) * (hi - lo);
    (lo + pad, hi - pad)
}

/// Apply one predicted pulse, capped at `max_pulse_ns`. Returns the
/// applied duration.
fn apply_predicted(
    device: &mut DeviceState,
    params: &DeviceParams,
    t: f64,
    max_pulse_ns: f64,
    noisy: bool,
) -> Result<f64, EvalError> {
    let Some(polarity) = Polarity::from_sign(t) else {
        return Ok(0.0);
    };
    let steps = device.apply_pulse(params, polarity, t.abs().min(max_pulse_ns), noisy)?;
    Ok(steps as f64 * params.dt)
}

fn checked_predict(p: &dyn PulsePredictor, g_now: f64, delta_g: f64) -> Result<f64, EvalError> {
    let t = p.predict(g_now, delta_g);
    if t.is_finite() {
        Ok(t)
    } else {
        Err(EvalError::NonFinitePrediction {
            predictor: p.name().to_string(),
            g_now,
            delta_g,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneShotConfig {
    pub n_trials: usize,
    /// Start and target draws are uniform in `[g_lo, g_hi]` (µS).
    pub g_lo: f64,
    pub g_hi: f64,
    pub noisy: bool,
    /// Bins per axis for the (g_start, g_target) grid.
    pub bins: usize,
    pub max_pulse_ns: f64,
}

impl Default for OneShotConfig {
    fn default() -> Self {
        // Central 80 % of the default operational range [67.5, 382.5].
        let (g_lo, g_hi) = central(67.5, 382.5, 0.8);
        Self {
            n_trials: 1000,
            g_lo,
            g_hi,
            noisy: true,
            bins: 10,
            max_pulse_ns: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub g_start: f64,
    pub g_target: f64,
    pub t_predicted: f64,
    pub g_end: f64,
    pub rpd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub start_lo: f64,
    pub start_hi: f64,
    pub target_lo: f64,
    pub target_hi: f64,
    pub mean_rpd: f64,
    pub std_rpd: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub predictor: String,
    pub trials: Vec<Trial>,
    pub cells: Vec<Cell>,
    pub aggregate: RpdReport,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fresh device per trial at a random start; one predicted pulse toward a
/// random target; conductance RPD of the result.
pub fn one_shot_eval(
    predictor: &dyn PulsePredictor,
    params: &DeviceParams,
    cfg: &OneShotConfig,
    seed: u64,
) -> Result<SweepReport, EvalError> {
    params.validate()?;
    if cfg.n_trials == 0 || cfg.bins == 0 || !(cfg.g_hi > cfg.g_lo) {
        return Err(EvalError::Config("need n_trials, bins >= 1 and g_hi > g_lo".into()));
    }
    let trials = (0..cfg.n_trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, &[stream::ONE_SHOT, i]));
            let g_start = rng.random_range(cfg.g_lo..cfg.g_hi);
            let g_target = rng.random_range(cfg.g_lo..cfg.g_hi);
            let mut device = DeviceState::with_conductance(params, rng.random(), g_start)?;
            let g0 = device.read_conductance();
            let t = checked_predict(predictor, g0, g_target - g0)?;
            apply_predicted(&mut device, params, t, cfg.max_pulse_ns, cfg.noisy)?;
            let g_end = device.read_conductance();
            Ok(Trial {
                g_start,
                g_target,
                t_predicted: t,
                g_end,
                rpd: 0.0,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let outs: Vec<f64> = trials.iter().map(|t| t.g_end).collect();
    let tgts: Vec<f64> = trials.iter().map(|t| t.g_target).collect();
    let aggregate = rpd(&outs, &tgts)?;
    let trials: Vec<Trial> = trials
        .into_iter()
        .zip(&aggregate.per_trial_rpd)
        .map(|(t, &r)| Trial { rpd: r, ..t })
        .collect();

    let width = (cfg.g_hi - cfg.g_lo) / cfg.bins as f64;
    let bin = |g: f64| (((g - cfg.g_lo) / width) as usize).min(cfg.bins - 1);
    let mut buckets = vec![Vec::new(); cfg.bins * cfg.bins];
    for t in &trials {
        buckets[bin(t.g_start) * cfg.bins + bin(t.g_target)].push(t.rpd);
    }
    let cells = buckets
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(k, b)| {
            let (si, ti) = (k / cfg.bins, k % cfg.bins);
            let (mean_rpd, std_rpd) = mean_std(b);
            Cell {
                start_lo: cfg.g_lo + si as f64 * width,
                start_hi: cfg.g_lo + (si + 1) as f64 * width,
                target_lo: cfg.g_lo + ti as f64 * width,
                target_hi: cfg.g_lo + (ti + 1) as f64 * width,
                mean_rpd,
                std_rpd,
                trials: b.len(),
            }
        })
        .collect();

    Ok(SweepReport {
        predictor: predictor.name().to_string(),
        trials,
        cells,
        aggregate,
    })
}

impl SweepReport {
    pub fn write_trials_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "trial,g_start_uS,g_target_uS,t_predicted_ns,g_end_uS,rpd")?;
        for (i, t) in self.trials.iter().enumerate() {
            writeln!(w, "{i},{},{},{},{},{}", t.g_start, t.g_target, t.t_predicted, t.g_end, t.rpd)?;
        }
        Ok(())
    }

    pub fn write_cells_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "start_lo_uS,start_hi_uS,target_lo_uS,target_hi_uS,mean_rpd,std_rpd,trials")?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.start_lo, c.start_hi, c.target_lo, c.target_hi, c.mean_rpd, c.std_rpd, c.trials
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WavConfig {
    pub max_iter: usize,
    /// Convergence window half-width (µS).
    pub window: f64,
    pub noisy: bool,
    /// Stop as soon as a reading lands inside the window.
    pub stop_in_window: bool,
    pub max_pulse_ns: f64,
}

impl Default for WavConfig {
    fn default() -> Self {
        Self {
            max_iter: 20,
            window: 50.0,
            noisy: true,
            stop_in_window: false,
            max_pulse_ns: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavRecord {
    pub iteration: usize,
    pub t_predicted: f64,
    pub g_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavTrajectory {
    pub g_start: f64,
    pub g_target: f64,
    pub records: Vec<WavRecord>,
    pub converged_g: f64,
    /// First iteration whose reading is within the window; 0 when the
    /// start already is.
    pub iters_to_window: Option<usize>,
    /// Pulse time applied up to and including `iters_to_window`, or in
    /// total when the window was never reached (ns).
    pub pulse_ns_to_window: f64,
}

/// Read, predict the pulse for the remaining change, apply, repeat.
pub fn write_and_verify(
    predictor: &dyn PulsePredictor,
    params: &DeviceParams,
    g_start: f64,
    g_target: f64,
    cfg: &WavConfig,
    seed: u64,
) -> Result<WavTrajectory, EvalError> {
    let mut device = DeviceState::with_conductance(params, seed, g_start)?;
    let in_window = |g: f64| (g - g_target).abs() <= cfg.window;
    let mut iters_to_window = in_window(device.read_conductance()).then_some(0);
    let mut records = Vec::with_capacity(cfg.max_iter);
    let mut pulse_ns = 0.0;
    for iteration in 1..=cfg.max_iter {
        if cfg.stop_in_window && iters_to_window.is_some() {
            break;
        }
        let g = device.read_conductance();
        let t = checked_predict(predictor, g, g_target - g)?;
        let applied = apply_predicted(&mut device, params, t, cfg.max_pulse_ns, cfg.noisy)?;
        let g_after = device.read_conductance();
        if iters_to_window.is_none() {
            pulse_ns += applied;
            if in_window(g_after) {
                iters_to_window = Some(iteration);
            }
        }
        records.push(WavRecord {
            iteration,
            t_predicted: t,
            g_after,
        });
    }
    Ok(WavTrajectory {
        g_start,
        g_target,
        records,
        converged_g: device.read_conductance(),
        iters_to_window,
        pulse_ns_to_window: pulse_ns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WavSweepConfig {
    pub g_starts: Vec<f64>,
    pub targets: Vec<f64>,
    pub repeats: usize,
    /// Iteration budget for the "reached the window" statistic.
    pub window_within_iters: usize,
    pub wav: WavConfig,
}

impl Default for WavSweepConfig {
    fn default() -> Self {
        let p = DeviceParams::default();
        Self {
            g_starts: linspace(67.5, 382.5, 13),
            targets: scaled_targets(&p),
            repeats: 5,
            window_within_iters: 10,
            wav: WavConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavCell {
    pub g_target: f64,
    pub g_start: f64,
    pub mean_converged: f64,
    pub std_converged: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavTargetSummary {
    pub g_target: f64,
    pub mean_converged: f64,
    pub std_converged: f64,
    pub runs: usize,
    pub frac_in_window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavSweepReport {
    pub predictor: String,
    pub trajectories: Vec<WavTrajectory>,
    pub cells: Vec<WavCell>,
    pub targets: Vec<WavTargetSummary>,
}

/// Write-and-verify over a (target × start × repeat) grid. Run
/// `(target i, start j, repeat r)` uses its own derived seed, so adding
/// repeats leaves earlier runs unchanged.
pub fn wav_sweep(
    predictor: &dyn PulsePredictor,
    params: &DeviceParams,
    cfg: &WavSweepConfig,
    seed: u64,
) -> Result<WavSweepReport, EvalError> {
    if cfg.repeats == 0 || cfg.g_starts.is_empty() || cfg.targets.is_empty() {
        return Err(EvalError::Config("wav sweep needs starts, targets and repeats".into()));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.targets.len())
        .flat_map(|ti| {
            (0..cfg.g_starts.len()).flat_map(move |si| (0..cfg.repeats).map(move |r| (ti, si, r)))
        })
        .collect();
    let trajectories = jobs
        .par_iter()
        .map(|&(ti, si, r)| {
            let s = derive_seed(seed, &[stream::WAV, ti as u64, si as u64, r as u64]);
            write_and_verify(predictor, params, cfg.g_starts[si], cfg.targets[ti], &cfg.wav, s)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let per_cell = cfg.repeats;
    let cells = trajectories
        .chunks(per_cell)
        .map(|runs| {
            let conv: Vec<f64> = runs.iter().map(|t| t.converged_g).collect();
            let (m, s) = mean_std(&conv);
            WavCell {
                g_target: runs[0].g_target,
                g_start: runs[0].g_start,
                mean_converged: m,
                std_converged: s,
                runs: runs.len(),
            }
        })
        .collect();
    let targets = trajectories
        .chunks(per_cell * cfg.g_starts.len())
        .map(|runs| {
            let conv: Vec<f64> = runs.iter().map(|t| t.converged_g).collect();
            let (m, s) = mean_std(&conv);
            let reached = runs
                .iter()
                .filter(|t| t.iters_to_window.is_some_and(|k| k <= cfg.window_within_iters))
                .count();
            WavTargetSummary {
                g_target: runs[0].g_target,
                mean_converged: m,
                std_converged: s,
                runs: runs.len(),
                frac_in_window: reached as f64 / runs.len() as f64,
            }
        })
        .collect();
    Ok(WavSweepReport {
        predictor: predictor.name().to_string(),
        trajectories,
        cells,
        targets,
    })
}

impl WavSweepReport {
    /// Converged G against target, one row per (target, start) cell.
    pub fn write_cells_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "g_target_uS,g_start_uS,mean_converged_uS,std_converged_uS,runs")?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.g_target, c.g_start, c.mean_converged, c.std_converged, c.runs
            )?;
        }
        Ok(())
    }

    /// Every iteration of every run.
    pub fn write_trajectories_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "run,g_target_uS,g_start_uS,iteration,t_predicted_ns,g_after_uS")?;
        for (run, t) in self.trajectories.iter().enumerate() {
            writeln!(w, "{run},{},{},0,0,{}", t.g_target, t.g_start, t.g_start)?;
            for r in &t.records {
                writeln!(
                    w,
                    "{run},{},{},{},{},{}",
                    t.g_target, t.g_start, r.iteration, r.t_predicted, r.g_after
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayConfig {
    pub targets: Vec<f64>,
    pub g_starts: Vec<f64>,
    pub window: f64,
    /// Verify-iteration cap for either method.
    pub max_iter: usize,
    pub noisy: bool,
}

impl Default for DelayConfig {
    fn default() -> Self {
        let p = DeviceParams::default();
        Self {
            targets: scaled_targets(&p),
            g_starts: linspace(67.5, 382.5, 13),
            window: 50.0,
            max_iter: 1000,
            noisy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDelay {
    pub mean_iterations: f64,
    pub mean_pulse_ns: f64,
    /// Runs that hit the cap; they count `max_iter` iterations.
    pub non_converged: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub g_target: f64,
    pub predictor: MethodDelay,
    pub baseline: MethodDelay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    pub predictor: String,
    pub baseline: String,
    pub rows: Vec<DelayRow>,
}

/// Verify iterations and cumulative pulse time until the reading enters
/// the window, for `predictor` and `baseline` on identical devices.
pub fn delay_benchmark(
    predictor: &dyn PulsePredictor,
    baseline: &dyn PulsePredictor,
    params: &DeviceParams,
    cfg: &DelayConfig,
    seed: u64,
) -> Result<DelayReport, EvalError> {
    if cfg.targets.is_empty() || cfg.g_starts.is_empty() || cfg.max_iter == 0 {
        return Err(EvalError::Config("delay benchmark needs targets, starts and max_iter".into()));
    }
    let wav = WavConfig {
        max_iter: cfg.max_iter,
        window: cfg.window,
        noisy: cfg.noisy,
        stop_in_window: true,
        ..Default::default()
    };
    let method = |p: &dyn PulsePredictor, ti: usize| -> Result<MethodDelay, EvalError> {
        let runs = cfg
            .g_starts
            .par_iter()
            .enumerate()
            .map(|(si, &g0)| {
                let s = derive_seed(seed, &[stream::DELAY, ti as u64, si as u64]);
                write_and_verify(p, params, g0, cfg.targets[ti], &wav, s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = runs.len() as f64;
        let iters: f64 = runs
            .iter()
            .map(|r| r.iters_to_window.unwrap_or(cfg.max_iter) as f64)
            .sum();
        Ok(MethodDelay {
            mean_iterations: iters / n,
            mean_pulse_ns: runs.iter().map(|r| r.pulse_ns_to_window).sum::<f64>() / n,
            non_converged: runs.iter().filter(|r| r.iters_to_window.is_none()).count(),
            runs: runs.len(),
        })
    };
    let rows = (0..cfg.targets.len())
        .map(|ti| {
            Ok(DelayRow {
                g_target: cfg.targets[ti],
                predictor: method(predictor, ti)?,
                baseline: method(baseline, ti)?,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(DelayReport {
        predictor: predictor.name().to_string(),
        baseline: baseline.name().to_string(),
        rows,
    })
}

impl DelayReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "g_target_uS,method,mean_iterations,mean_pulse_ns,non_converged,runs")?;
        for r in &self.rows {
            for (name, m) in [(&self.predictor, &r.predictor), (&self.baseline, &r.baseline)] {
                writeln!(
                    w,
                    "{},{name},{},{},{},{}",
                    r.g_target, m.mean_iterations, m.mean_pulse_ns, m.non_converged, m.runs
                )?;
            }
        }
        Ok(())
    }
}
