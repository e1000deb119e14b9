//! Pulse-time training corpus.
//!
//! Each sample starts a fresh noisy device at a random conductance, pulses it
//! one dt at a time toward a random target until two consecutive readings
//! straddle the target, and keeps the reading closer to the target as the
//! end point. Pulsing then continues in the same polarity until the recorded
//! G–t history covers twice the pulse time.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::device::{DeviceError, DeviceParams, DeviceState, Polarity};
use crate::seed::{derive_seed, rng_from_seed, stream};

const MAGIC: &[u8; 4] = b"PPDS";
const FORMAT_VERSION: u32 = 1;
/// Attempts per sample index before the whole generation is abandoned.
const MAX_ATTEMPTS_PER_SAMPLE: u64 = 64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("dataset configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: corrupt dataset file: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn corrupt(path: &Path, reason: impl Into<String>) -> Self {
        DatasetError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_samples: usize,
    /// Sampling margin inside the nominal range, as a fraction of the range.
    pub margin_frac: f64,
    /// Minimum |g_target − g_start| (µS).
    pub min_gap: f64,
    /// Step cap as a multiple of the slowest full-transit step count.
    pub step_cap_factor: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            margin_frac: 0.05,
            min_gap: 1.0,
            step_cap_factor: 2.0,
        }
    }
}

impl DatasetConfig {
    pub fn operational_range(&self, params: &DeviceParams) -> (f64, f64) {
        let m = self.margin_frac * params.range();
        (params.g_min_nominal + m, params.g_max_nominal - m)
    }

    fn step_cap(&self, params: &DeviceParams) -> u64 {
        let slowest = params
            .transit_steps(Polarity::Set)
            .max(params.transit_steps(Polarity::Reset));
        (slowest as f64 * self.step_cap_factor).ceil() as u64
    }
}

/// Recorded conductance trajectory. Entry `i` was read at signed time
/// `sign · i · dt`; entry 0 is the start conductance.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub polarity: Polarity,
    pub dt: f64,
    pub g: Vec<f64>,
}

impl History {
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.polarity.sign() * i as f64 * self.dt
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.g.iter().enumerate().map(|(i, &g)| (self.time_at(i), g))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub g_start: f64,
    pub g_target: f64,
    pub g_end: f64,
    /// Signed pulse time (ns): positive for SET, negative for RESET.
    pub t_pulse: f64,
    pub history: History,
}

impl Sample {
    pub fn delta_g(&self) -> f64 {
        self.g_target - self.g_start
    }

    /// History index of `g_end`.
    pub fn end_index(&self) -> usize {
        (self.t_pulse.abs() / self.history.dt).round() as usize
    }
}

/// Why a generation attempt was discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// No straddle within the step cap.
    StepCap,
    /// The start reading itself was the closer straddling value.
    ZeroPulse,
}

/// One generation attempt from a dedicated seed.
pub fn generate_sample(
    params: &DeviceParams,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Result<Sample, Rejection>, DatasetError> {
    let (lo, hi) = cfg.operational_range(params);
    if !(hi - lo > cfg.min_gap) {
        return Err(DatasetError::Config(
            "operational range narrower than minimum gap".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let (g_start, g_target) = loop {
        let a = rng.random_range(lo..hi);
        let b = rng.random_range(lo..hi);
        if (b - a).abs() >= cfg.min_gap {
            break (a, b);
        }
    };
    let polarity = Polarity::from_sign(g_target - g_start).expect("gap is non-zero");
    let mut device = DeviceState::with_conductance(params, rng.random(), g_start)?;
    let cap = cfg.step_cap(params);

    let mut g = Vec::with_capacity(1024);
    g.push(device.read_conductance());
    let mut end = None;
    for i in 1..=cap as usize {
        device.step(params, polarity, true);
        let now = device.read_conductance();
        g.push(now);
        let before = g[i - 1];
        if (before - g_target) * (now - g_target) <= 0.0 {
            end = Some(if (before - g_target).abs() < (now - g_target).abs() {
                i - 1
            } else {
                i
            });
            break;
        }
    }
    let Some(end) = end else {
        return Ok(Err(Rejection::StepCap));
    };
    if end == 0 {
        return Ok(Err(Rejection::ZeroPulse));
    }
    while g.len() < 2 * end + 1 {
        device.step(params, polarity, true);
        g.push(device.read_conductance());
    }
    g.truncate(2 * end + 1);

    Ok(Ok(Sample {
        g_start: g[0],
        g_target,
        g_end: g[end],
        t_pulse: polarity.sign() * end as f64 * params.dt,
        history: History {
            polarity,
            dt: params.dt,
            g,
        },
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kind {
    G,
    T,
}

/// Rough normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    /// Conductance scale (µS).
    pub g_ref: f64,
    /// Pulse-time scale (ns).
    pub t_ref: f64,
}

impl Norm {
    /// `G ↦ G / g_ref`; signed `t ↦ 0.5 + 0.5 · t / t_ref`.
    pub fn normalize(&self, value: f64, kind: Kind) -> f64 {
        match kind {
            Kind::G => value / self.g_ref,
            Kind::T => 0.5 + 0.5 * value / self.t_ref,
        }
    }

    pub fn denormalize(&self, value: f64, kind: Kind) -> f64 {
        match kind {
            Kind::G => value * self.g_ref,
            Kind::T => (value - 0.5) * 2.0 * self.t_ref,
        }
    }

    pub fn g(&self, g: f64) -> f64 {
        self.normalize(g, Kind::G)
    }

    pub fn t(&self, t: f64) -> f64 {
        self.normalize(t, Kind::T)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.g_ref.is_finite() && self.g_ref > 0.0 && self.t_ref.is_finite() && self.t_ref > 0.0 {
            Ok(())
        } else {
            Err(DatasetError::Config(format!("invalid normalization {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle, then 80 / 10 / 10.
    pub fn new(n: usize, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_from_seed(derive_seed(seed, &[stream::DATASET_SPLIT])));
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Split {
            train: idx,
            val,
            test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub attempts: u64,
    pub rejected_step_cap: u64,
    pub rejected_zero_pulse: u64,
}

impl GenerationStats {
    pub fn rejections(&self) -> u64 {
        self.rejected_step_cap + self.rejected_zero_pulse
    }

    pub fn rejection_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.rejections() as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub norm: Norm,
    pub seed: u64,
    pub stats: GenerationStats,
    pub params: DeviceParams,
    pub config: DatasetConfig,
}

/// Generate `cfg.n_samples` accepted samples. Sample `i` draws from streams
/// derived from `(seed, i, attempt)`, so the result is independent of the
/// rayon pool size.
pub fn generate_dataset(
    params: &DeviceParams,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    params.validate()?;
    if cfg.n_samples < 10 {
        return Err(DatasetError::Config("need at least 10 samples".into()));
    }
    let results: Vec<Result<(Sample, u64, u64), DatasetError>> = (0..cfg.n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let (mut cap_rej, mut zero_rej) = (0u64, 0u64);
            for attempt in 0..MAX_ATTEMPTS_PER_SAMPLE {
                let s = derive_seed(seed, &[stream::DATASET_SAMPLE, i, attempt]);
                match generate_sample(params, cfg, s)? {
                    Ok(sample) => return Ok((sample, cap_rej, zero_rej)),
                    Err(Rejection::StepCap) => cap_rej += 1,
                    Err(Rejection::ZeroPulse) => zero_rej += 1,
                }
            }
            Err(DatasetError::Config(format!(
                "sample {i}: no accepted attempt in {MAX_ATTEMPTS_PER_SAMPLE}; range/noise mismatch"
            )))
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut stats = GenerationStats {
        attempts: 0,
        rejected_step_cap: 0,
        rejected_zero_pulse: 0,
    };
    for r in results {
        let (sample, cap_rej, zero_rej) = r?;
        stats.attempts += 1 + cap_rej + zero_rej;
        stats.rejected_step_cap += cap_rej;
        stats.rejected_zero_pulse += zero_rej;
        samples.push(sample);
    }
    if stats.rejections() > 0 {
        log::info!(
            "dataset: {} rejected attempts ({} step cap, {} zero pulse) of {}",
            stats.rejections(),
            stats.rejected_step_cap,
            stats.rejected_zero_pulse,
            stats.attempts
        );
    }
    if stats.rejection_rate() > 0.5 {
        return Err(DatasetError::Config(format!(
            "rejection rate {:.1}% exceeds 50%; range/noise mismatch",
            100.0 * stats.rejection_rate()
        )));
    }

    let split = Split::new(samples.len(), seed);
    let t_ref = split
        .train
        .iter()
        .map(|&i| samples[i].t_pulse.abs())
        .fold(0.0, f64::max);
    let norm = Norm {
        g_ref: params.g_max_nominal,
        t_ref,
    };
    norm.validate()?;
    Ok(Dataset {
        samples,
        split,
        norm,
        seed,
        stats,
        params: params.clone(),
        config: cfg.clone(),
    })
}

/// JSON sidecar describing a persisted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n_samples: usize,
    pub seed: u64,
    pub stats: GenerationStats,
    pub norm: Norm,
    pub split: Split,
    pub device: DeviceParams,
    pub dataset: DatasetConfig,
    pub samples_file: String,
    pub samples_sha256: String,
}

pub fn meta_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.meta.json"))
}

pub fn samples_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.samples.bin"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.split.train.iter().map(|&i| &self.samples[i])
    }

    pub fn val(&self) -> impl Iterator<Item = &Sample> {
        self.split.val.iter().map(|&i| &self.samples[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.split.test.iter().map(|&i| &self.samples[i])
    }

    /// Little-endian binary container:
    /// `"PPDS" u32:version u64:n`, then per sample
    /// `f64 g_start, g_target, g_end, t_pulse, dt; u8 polarity; u64 len; len × f64 G`.
    pub fn samples_bytes(&self) -> Vec<u8> {
        let total: usize = self.samples.iter().map(|s| 49 + 8 * s.history.len()).sum();
        let mut out = Vec::with_capacity(16 + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            for v in [s.g_start, s.g_target, s.g_end, s.t_pulse, s.history.dt] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(match s.history.polarity {
                Polarity::Set => 0,
                Polarity::Reset => 1,
            });
            out.extend_from_slice(&(s.history.len() as u64).to_le_bytes());
            for g in &s.history.g {
                out.extend_from_slice(&g.to_le_bytes());
            }
        }
        out
    }

    pub fn meta(&self, samples_sha256: String, samples_file: String) -> DatasetMeta {
        DatasetMeta {
            format_version: FORMAT_VERSION,
            n_samples: self.samples.len(),
            seed: self.seed,
            stats: self.stats.clone(),
            norm: self.norm,
            split: self.split.clone(),
            device: self.params.clone(),
            dataset: self.config.clone(),
            samples_file,
            samples_sha256,
        }
    }

    /// Write `<name>.meta.json` and `<name>.samples.bin`; returns both paths.
    pub fn save(&self, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf), DatasetError> {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        let bin_path = samples_path(dir, name);
        let meta_file = meta_path(dir, name);
        let bytes = self.samples_bytes();
        let file_name = bin_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let meta = self.meta(sha256_hex(&bytes), file_name);
        fs::write(&bin_path, &bytes).map_err(|e| DatasetError::io(&bin_path, e))?;
        let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        fs::write(&meta_file, json).map_err(|e| DatasetError::io(&meta_file, e))?;
        Ok((meta_file, bin_path))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self, DatasetError> {
        let meta_file = meta_path(dir, name);
        let raw = fs::read(&meta_file).map_err(|e| DatasetError::io(&meta_file, e))?;
        let meta: DatasetMeta = serde_json::from_slice(&raw)
            .map_err(|e| DatasetError::corrupt(&meta_file, e.to_string()))?;
        let bin_path = dir.join(&meta.samples_file);
        let bytes = fs::read(&bin_path).map_err(|e| DatasetError::io(&bin_path, e))?;
        if sha256_hex(&bytes) != meta.samples_sha256 {
            return Err(DatasetError::corrupt(&bin_path, "checksum mismatch"));
        }
        let samples =
            parse_samples(&bytes).map_err(|reason| DatasetError::corrupt(&bin_path, reason))?;
        if samples.len() != meta.n_samples {
            return Err(DatasetError::corrupt(&bin_path, "sample count mismatch"));
        }
        let n = samples.len();
        let mut seen = vec![false; n];
        for &i in meta.split.train.iter().chain(&meta.split.val).chain(&meta.split.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(DatasetError::corrupt(&meta_file, "split is not a partition"));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(DatasetError::corrupt(&meta_file, "split is not a partition"));
        }
        meta.norm
            .validate()
            .map_err(|_| DatasetError::corrupt(&meta_file, "invalid normalization"))?;
        Ok(Dataset {
            samples,
            split: meta.split,
            norm: meta.norm,
            seed: meta.seed,
            stats: meta.stats,
            params: meta.device,
            config: meta.dataset,
        })
    }

    /// One row per sample; histories elided.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut split_of = vec!["train"; self.samples.len()];
        for &i in &self.split.val {
            split_of[i] = "val";
        }
        for &i in &self.split.test {
            split_of[i] = "test";
        }
        writeln!(w, "index,split,g_start_uS,g_target_uS,g_end_uS,t_pulse_ns,history_len")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{},{},{},{}",
                split_of[i],
                s.g_start,
                s.g_target,
                s.g_end,
                s.t_pulse,
                s.history.len()
            )?;
        }
        Ok(())
    }
}

fn parse_samples(bytes: &[u8]) -> Result<Vec<Sample>, String> {
    struct Cursor<'a>(&'a [u8]);
    impl Cursor<'_> {
        fn take<const N: usize>(&mut self) -> Result<[u8; N], String> {
            if self.0.len() < N {
                return Err("truncated".into());
            }
            let (head, rest) = self.0.split_at(N);
            self.0 = rest;
            Ok(head.try_into().expect("length checked"))
        }
        fn f64(&mut self) -> Result<f64, String> {
            Ok(f64::from_le_bytes(self.take()?))
        }
        fn u64(&mut self) -> Result<u64, String> {
            Ok(u64::from_le_bytes(self.take()?))
        }
    }

    let mut c = Cursor(bytes);
    if &c.take::<4>()? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(c.take()?);
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let n = c.u64()? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let (g_start, g_target, g_end, t_pulse, dt) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?, c.f64()?);
        let polarity = match c.take::<1>()?[0] {
            0 => Polarity::Set,
            1 => Polarity::Reset,
            p => return Err(format!("bad polarity tag {p}")),
        };
        let len = c.u64()? as usize;
        if c.0.len() < len.saturating_mul(8) {
            return Err("truncated history".into());
        }
        let g = (0..len).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
        samples.push(Sample {
            g_start,
            g_target,
            g_end,
            t_pulse,
            history: History { polarity, dt, g },
        });
    }
    if !c.0.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(samples)
}
