//! Run configuration: one JSON document, every key optional, unknown keys
//! rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use pulseprog::dataset::DatasetConfig;
use pulseprog::device::{DeviceParams, Polarity};
use pulseprog::eval::{DelayConfig, OneShotConfig, WavConfig, WavSweepConfig};
use pulseprog::gtmap::FinetuneConfig;
use pulseprog::nn::TrainConfig;
use pulseprog::oracle::OracleConfig;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageName {
    #[serde(rename = "device.switching-curve")]
    SwitchingCurve,
    #[serde(rename = "dataset")]
    Dataset,
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "finetune")]
    Finetune,
    #[serde(rename = "eval.oneshot")]
    OneShot,
    #[serde(rename = "eval.wav")]
    Wav,
    #[serde(rename = "eval.wav-sweep")]
    WavSweep,
    #[serde(rename = "eval.delay")]
    Delay,
}

impl StageName {
    pub const ALL: [StageName; 8] = [
        StageName::SwitchingCurve,
        StageName::Dataset,
        StageName::Train,
        StageName::Finetune,
        StageName::OneShot,
        StageName::Wav,
        StageName::WavSweep,
        StageName::Delay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::SwitchingCurve => "device.switching-curve",
            StageName::Dataset => "dataset",
            StageName::Train => "train",
            StageName::Finetune => "finetune",
            StageName::OneShot => "eval.oneshot",
            StageName::Wav => "eval.wav",
            StageName::WavSweep => "eval.wav-sweep",
            StageName::Delay => "eval.delay",
        }
    }

    pub fn is_eval(self) -> bool {
        self >= StageName::OneShot
    }

    /// Stages whose artifacts this one reads under `cfg`.
    pub fn direct_inputs(self, cfg: &RunConfig) -> Vec<StageName> {
        match self {
            StageName::SwitchingCurve | StageName::Dataset => vec![],
            StageName::Train => vec![StageName::Dataset],
            StageName::Finetune => vec![StageName::Dataset, StageName::Train],
            _ if cfg.eval.uses_pipeline_model() => vec![StageName::Finetune],
            _ => vec![],
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageName::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = StageName::ALL.iter().map(|n| n.as_str()).collect();
            format!("unknown stage `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// `targets` plus everything they read, transitively, in execution order.
pub fn with_prerequisites(cfg: &RunConfig, targets: &[StageName]) -> Vec<StageName> {
    let mut needed: Vec<StageName> = targets.to_vec();
    let mut i = 0;
    while i < needed.len() {
        for dep in needed[i].direct_inputs(cfg) {
            if !needed.contains(&dep) {
                needed.push(dep);
            }
        }
        i += 1;
    }
    needed.sort();
    needed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchingCurveConfig {
    /// Pulses of one dt each, per device.
    pub pulses: usize,
    pub devices: usize,
    pub polarities: Vec<Polarity>,
    pub noisy: bool,
}

impl Default for SwitchingCurveConfig {
    fn default() -> Self {
        Self {
            pulses: 8000,
            devices: 10,
            polarities: vec![Polarity::Set, Polarity::Reset],
            noisy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSection {
    pub params: DeviceParams,
    pub switching_curve: SwitchingCurveConfig,
}

/// A single write-and-verify run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WavRun {
    pub g_start: f64,
    pub g_target: f64,
    pub max_iter: usize,
    pub window: f64,
    pub noisy: bool,
    pub stop_in_window: bool,
    pub max_pulse_ns: f64,
}

impl Default for WavRun {
    fn default() -> Self {
        let w = WavConfig::default();
        Self {
            g_start: 100.0,
            g_target: 220.0,
            max_iter: w.max_iter,
            window: w.window,
            noisy: w.noisy,
            stop_in_window: w.stop_in_window,
            max_pulse_ns: w.max_pulse_ns,
        }
    }
}

impl WavRun {
    pub fn config(&self) -> WavConfig {
        WavConfig {
            max_iter: self.max_iter,
            window: self.window,
            noisy: self.noisy,
            stop_in_window: self.stop_in_window,
            max_pulse_ns: self.max_pulse_ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Registered predictor name: `mlp`, `oracle` or `fixed-pulse`.
    pub predictor: String,
    /// Model for `mlp`; the pipeline's fine-tuned model when absent.
    pub checkpoint: Option<PathBuf>,
    /// Pulse length of the `fixed-pulse` predictor and the delay baseline.
    pub fixed_pulse_ns: f64,
    pub oneshot: OneShotConfig,
    pub wav: WavRun,
    pub wav_sweep: WavSweepConfig,
    pub delay: DelayConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            predictor: "mlp".into(),
            checkpoint: None,
            fixed_pulse_ns: 500.0,
            oneshot: OneShotConfig::default(),
            wav: WavRun::default(),
            wav_sweep: WavSweepConfig::default(),
            delay: DelayConfig::default(),
        }
    }
}

impl EvalSection {
    pub fn uses_pipeline_model(&self) -> bool {
        self.predictor == "mlp" && self.checkpoint.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its streams from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Stages run by `pipeline`.
    pub stages: Vec<StageName>,
    pub device: DeviceSection,
    pub oracle: OracleConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("run"),
            stages: StageName::ALL.to_vec(),
            device: DeviceSection::default(),
            oracle: OracleConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagate the master seed and check every section.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
        self.device.params.validate().context("device.params")?;
        self.oracle.validate(&self.device.params).context("oracle")?;
        self.train.validate().context("train")?;
        self.finetune.validate().context("finetune")?;
        if self.device.switching_curve.pulses == 0 || self.device.switching_curve.devices == 0 {
            bail!("device.switching_curve: pulses and devices must be at least 1");
        }
        if !(self.eval.fixed_pulse_ns > 0.0) {
            bail!("eval.fixed_pulse_ns must be positive");
        }
        Ok(self)
    }
}
