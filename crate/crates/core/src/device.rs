//! Phenomenological memristor model.
//!
//! The internal switching variable `x ∈ [0, 1]` follows a clamped logistic
//! ODE, integrated with explicit Euler at the pulse quantum `dt`:
//!
//! ```text
//! dx/dt = ±rho · k · (x + eps) · (1 − x + eps)
//! ```
//!
//! The logistic factor gives self-accelerating switching away from the
//! bounds and saturation near them, so a train of identical pulses traces an
//! S-shaped conductance curve. Conductance is read as
//! `G = g_min_t + x · (g_max_t − g_min_t)`.
//!
//! Cycle-to-cycle variation is a reflected random walk on the rate
//! multiplier `rho` and on both conductance bounds, applied after every
//! `dt` of a noisy pulse.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng_from_seed, stream, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("invalid device parameter: {0}")]
    InvalidParams(String),
    #[error("invalid pulse duration {0} ns")]
    InvalidDuration(f64),
}

/// Pulse polarity. SET raises conductance, RESET lowers it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Set,
    Reset,
}

impl Polarity {
    /// Polarity encoded by the sign of a pulse time or conductance change.
    /// Zero has no direction.
    pub fn from_sign(v: f64) -> Option<Self> {
        if v > 0.0 {
            Some(Polarity::Set)
        } else if v < 0.0 {
            Some(Polarity::Reset)
        } else {
            None
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Polarity::Set => 1.0,
            Polarity::Reset => -1.0,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Polarity::Set => Polarity::Reset,
            Polarity::Reset => Polarity::Set,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceParams {
    /// Nominal lower conductance bound (µS).
    pub g_min_nominal: f64,
    /// Nominal upper conductance bound (µS).
    pub g_max_nominal: f64,
    /// SET rate constant (1/ns).
    pub k_set: f64,
    /// RESET rate constant (1/ns).
    pub k_reset: f64,
    /// Boundary leak keeping `x = 0` and `x = 1` non-absorbing.
    pub eps_floor: f64,
    /// Per-step std of the rate-multiplier random walk.
    pub sigma_rate: f64,
    /// Per-step std of the bound random walks (µS).
    pub sigma_bound: f64,
    /// Relative reflection band for `rho` around 1.
    pub rate_band: f64,
    /// Relative reflection band for each bound around its nominal value.
    pub bound_band: f64,
    /// Pulse quantum (ns).
    pub dt: f64,
    /// Label only; the model is driven by polarity and duration.
    pub v_set: f64,
    /// Label only.
    pub v_reset: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        // Full noise-free SET transit x: 0.01 -> 0.99 is 2 ln(50) / (k (1 + 2 eps))
        // ≈ 60 µs, i.e. about 6000 pulses of 10 ns.
        let k_set = 1.28e-4;
        Self {
            g_min_nominal: 50.0,
            g_max_nominal: 400.0,
            k_set,
            k_reset: 2.0 * k_set,
            eps_floor: 0.01,
            sigma_rate: 0.002,
            // 2 % of the 350 µS range per 100 steps: 7 µS / sqrt(100).
            sigma_bound: 0.7,
            rate_band: 0.1,
            bound_band: 0.1,
            dt: 10.0,
            v_set: 1.0,
            v_reset: -1.0,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |msg: &str| Err(DeviceError::InvalidParams(msg.to_string()));
        let all_finite = [
            self.g_min_nominal,
            self.g_max_nominal,
            self.k_set,
            self.k_reset,
            self.eps_floor,
            self.sigma_rate,
            self.sigma_bound,
            self.rate_band,
            self.bound_band,
            self.dt,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite value");
        }
        if !(self.g_min_nominal > 0.0 && self.g_min_nominal < self.g_max_nominal) {
            return bad("require 0 < g_min_nominal < g_max_nominal");
        }
        if self.dt <= 0.0 {
            return bad("dt must be positive");
        }
        if self.k_set <= 0.0 || self.k_reset <= 0.0 {
            return bad("rate constants must be positive");
        }
        if self.eps_floor <= 0.0 {
            return bad("eps_floor must be positive");
        }
        if self.sigma_rate < 0.0 || self.sigma_bound < 0.0 {
            return bad("noise std must be non-negative");
        }
        if !(0.0..1.0).contains(&self.rate_band) || !(0.0..1.0).contains(&self.bound_band) {
            return bad("reflection bands must lie in [0, 1)");
        }
        // Bands must not let the bounds cross.
        if self.g_min_nominal * (1.0 + self.bound_band)
            >= self.g_max_nominal * (1.0 - self.bound_band)
        {
            return bad("bound reflection bands overlap");
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.g_max_nominal - self.g_min_nominal
    }

    pub fn rate(&self, polarity: Polarity) -> f64 {
        match polarity {
            Polarity::Set => self.k_set,
            Polarity::Reset => self.k_reset,
        }
    }

    /// Same parameters with every noise source switched off.
    pub fn noise_free(&self) -> Self {
        Self {
            sigma_rate: 0.0,
            sigma_bound: 0.0,
            ..self.clone()
        }
    }

    /// Number of dt quanta needed to cover `duration_ns`, rounding up.
    pub fn steps_for(&self, duration_ns: f64) -> Result<u64, DeviceError> {
        if !duration_ns.is_finite() || duration_ns < 0.0 {
            return Err(DeviceError::InvalidDuration(duration_ns));
        }
        let q = duration_ns / self.dt;
        // Absorb float noise from sums of exact multiples of dt.
        Ok((q - 1e-9).ceil().max(0.0) as u64)
    }

    /// Noise-free step count for a full transit between x = 0.01 and x = 0.99.
    pub fn transit_steps(&self, polarity: Polarity) -> u64 {
        let mut x: f64 = match polarity {
            Polarity::Set => 0.01,
            Polarity::Reset => 0.99,
        };
        let mut n = 0u64;
        let done = |x: f64| match polarity {
            Polarity::Set => x >= 0.99,
            Polarity::Reset => x <= 0.01,
        };
        while !done(x) {
            x = euler_step(self, polarity, x, 1.0);
            n += 1;
        }
        n
    }

    fn bound_band_of(&self, nominal: f64) -> (f64, f64) {
        (nominal * (1.0 - self.bound_band), nominal * (1.0 + self.bound_band))
    }
}

/// Right-hand side of the switching ODE (without the polarity sign).
pub fn switching_rate(params: &DeviceParams, polarity: Polarity, x: f64, rho: f64) -> f64 {
    let e = params.eps_floor;
    rho * params.rate(polarity) * (x + e) * (1.0 - x + e)
}

fn euler_step(params: &DeviceParams, polarity: Polarity, x: f64, rho: f64) -> f64 {
    let dx = polarity.sign() * switching_rate(params, polarity, x, rho) * params.dt;
    (x + dx).clamp(0.0, 1.0)
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    while v < lo || v > hi {
        if v < lo {
            v = 2.0 * lo - v;
        }
        if v > hi {
            v = 2.0 * hi - v;
        }
    }
    v
}

/// Mutable state of one simulated device. Owns its random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    x: f64,
    g_min_t: f64,
    g_max_t: f64,
    rho: f64,
    rng: Rng,
}

impl DeviceState {
    /// Fresh device at mid-state with nominal bounds.
    pub fn new(params: &DeviceParams, seed: u64) -> Result<Self, DeviceError> {
        params.validate()?;
        Ok(Self {
            x: 0.5,
            g_min_t: params.g_min_nominal,
            g_max_t: params.g_max_nominal,
            rho: 1.0,
            rng: rng_from_seed(seed),
        })
    }

    /// Fresh device whose conductance reads `g` (clamped into the bounds).
    pub fn with_conductance(params: &DeviceParams, seed: u64, g: f64) -> Result<Self, DeviceError> {
        let mut state = Self::new(params, seed)?;
        state.x = ((g - state.g_min_t) / (state.g_max_t - state.g_min_t)).clamp(0.0, 1.0);
        Ok(state)
    }

    /// Clamped so rounding at x = 1 cannot step past `g_max_t`.
    pub fn read_conductance(&self) -> f64 {
        (self.g_min_t + self.x * (self.g_max_t - self.g_min_t)).clamp(self.g_min_t, self.g_max_t)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.g_min_t, self.g_max_t)
    }

    /// Set the internal variable directly. Test and tooling use only.
    pub fn set_x(&mut self, x: f64) {
        self.x = x.clamp(0.0, 1.0);
    }

    /// Apply a pulse of `duration_ns` (rounded up to whole dt quanta).
    /// Returns the number of quanta applied.
    pub fn apply_pulse(
        &mut self,
        params: &DeviceParams,
        polarity: Polarity,
        duration_ns: f64,
        noisy: bool,
    ) -> Result<u64, DeviceError> {
        let steps = params.steps_for(duration_ns)?;
        self.apply_steps(params, polarity, steps, noisy);
        Ok(steps)
    }

    pub fn apply_steps(&mut self, params: &DeviceParams, polarity: Polarity, steps: u64, noisy: bool) {
        for _ in 0..steps {
            self.step(params, polarity, noisy);
        }
    }

    /// One dt quantum: Euler update, then (optionally) one noise step.
    pub fn step(&mut self, params: &DeviceParams, polarity: Polarity, noisy: bool) {
        self.x = euler_step(params, polarity, self.x, self.rho);
        if noisy {
            self.noise_step(params);
        }
    }

    /// Reflected random walk on the rate multiplier and both bounds.
    pub fn noise_step(&mut self, params: &DeviceParams) {
        if params.sigma_rate > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.rho = reflect(
                self.rho + params.sigma_rate * z,
                1.0 - params.rate_band,
                1.0 + params.rate_band,
            );
        }
        if params.sigma_bound > 0.0 {
            let z_lo: f64 = StandardNormal.sample(&mut self.rng);
            let z_hi: f64 = StandardNormal.sample(&mut self.rng);
            let (lo_a, lo_b) = params.bound_band_of(params.g_min_nominal);
            let (hi_a, hi_b) = params.bound_band_of(params.g_max_nominal);
            self.g_min_t = reflect(self.g_min_t + params.sigma_bound * z_lo, lo_a, lo_b);
            self.g_max_t = reflect(self.g_max_t + params.sigma_bound * z_hi, hi_a, hi_b);
        }
        self.x = self.x.clamp(0.0, 1.0);
    }
}

/// Conductance traces of `n_devices` fresh devices driven from the opposite
/// boundary by `n_pulses` pulses of one dt each.
pub fn switching_curve(
    params: &DeviceParams,
    n_pulses: usize,
    n_devices: usize,
    polarity: Polarity,
    noisy: bool,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DeviceError> {
    if n_pulses == 0 || n_devices == 0 {
        return Err(DeviceError::InvalidParams(
            "n_pulses and n_devices must be at least 1".into(),
        ));
    }
    (0..n_devices)
        .map(|d| {
            let dev_seed = derive_seed(seed, &[stream::SWITCHING_CURVE, d as u64]);
            let mut state = DeviceState::new(params, dev_seed)?;
            state.x = match polarity {
                Polarity::Set => 0.0,
                Polarity::Reset => 1.0,
            };
            Ok((0..n_pulses)
                .map(|_| {
                    state.step(params, polarity, noisy);
                    state.read_conductance()
                })
                .collect())
        })
        .collect()
}
