//! Noise-free baseline pulse predictor.
//!
//! Solves for the dt-quantized pulse time that moves a nominal, noise-free
//! device from `g_start` to `g_start + delta_g`. The search brackets the
//! crossing by doubling the step count, carrying the integrated state
//! forward (pulses are time-additive on the noise-free model), then bisects
//! inside the bracket.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceError, DeviceParams, DeviceState, Polarity};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("conductance {value} µS outside nominal range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Landing tolerance (µS).
    pub tol_g: f64,
    /// Search cap (ns).
    pub max_time: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            tol_g: 0.5,
            max_time: 1e6,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self, params: &DeviceParams) -> Result<(), OracleError> {
        if !(self.tol_g > 0.0) {
            return Err(OracleError::InvalidConfig("tol_g must be positive".into()));
        }
        if !(self.max_time >= params.dt) {
            return Err(OracleError::InvalidConfig("max_time must be at least dt".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSolution {
    /// Signed pulse time (ns); positive for SET.
    pub time_ns: f64,
    /// Noise-free conductance after applying `time_ns`.
    pub landed_g: f64,
    /// The target was not reached within `max_time`; `time_ns` is the cap.
    pub saturated: bool,
}

impl OracleSolution {
    pub fn within(&self, target: f64, tol: f64) -> bool {
        (self.landed_g - target).abs() <= tol
    }
}

fn check_in_range(params: &DeviceParams, g: f64) -> Result<(), OracleError> {
    let (lo, hi) = (params.g_min_nominal, params.g_max_nominal);
    if !(g >= lo && g <= hi) {
        return Err(OracleError::OutOfRange { value: g, lo, hi });
    }
    Ok(())
}

/// Signed pulse time reaching `g_start + delta_g` on the noise-free model.
pub fn oracle_pulse_time(
    params: &DeviceParams,
    g_start: f64,
    delta_g: f64,
    cfg: &OracleConfig,
) -> Result<OracleSolution, OracleError> {
    cfg.validate(params)?;
    check_in_range(params, g_start)?;
    let target = g_start + delta_g;
    check_in_range(params, target)?;

    let Some(polarity) = Polarity::from_sign(delta_g) else {
        return Ok(OracleSolution {
            time_ns: 0.0,
            landed_g: g_start,
            saturated: false,
        });
    };

    let clean = params.noise_free();
    let start = DeviceState::with_conductance(&clean, 0, g_start)?;
    let cap = clean.steps_for(cfg.max_time)?.max(1);
    let sign = polarity.sign();
    // Signed distance still to go; crossing when it drops to <= 0.
    let remaining = |s: &DeviceState| sign * (target - s.read_conductance());

    // Bracket: `lo` has not crossed yet, `hi` has.
    let mut lo_steps = 0u64;
    let mut lo_state = start;
    let mut chunk = 1u64;
    let (hi_steps, hi_state) = loop {
        let take = chunk.min(cap - lo_steps);
        let mut probe = lo_state.clone();
        probe.apply_steps(&clean, polarity, take, false);
        if remaining(&probe) <= 0.0 {
            break (lo_steps + take, probe);
        }
        lo_steps += take;
        lo_state = probe;
        if lo_steps >= cap {
            return Ok(OracleSolution {
                time_ns: sign * lo_steps as f64 * clean.dt,
                landed_g: lo_state.read_conductance(),
                saturated: true,
            });
        }
        chunk *= 2;
    };

    // Bisection over step counts, re-integrating only from the lower end.
    let (mut lo_n, mut lo_s, mut hi_n, mut hi_s) = (lo_steps, lo_state, hi_steps, hi_state);
    while hi_n - lo_n > 1 {
        let mid = lo_n + (hi_n - lo_n) / 2;
        let mut probe = lo_s.clone();
        probe.apply_steps(&clean, polarity, mid - lo_n, false);
        if remaining(&probe) <= 0.0 {
            hi_n = mid;
            hi_s = probe;
        } else {
            lo_n = mid;
            lo_s = probe;
        }
    }

    let g_lo = lo_s.read_conductance();
    let g_hi = hi_s.read_conductance();
    // Zero steps is only admissible for a zero change, handled above.
    let (n, g) = if lo_n > 0 && (g_lo - target).abs() < (g_hi - target).abs() {
        (lo_n, g_lo)
    } else {
        (hi_n, g_hi)
    };
    Ok(OracleSolution {
        time_ns: sign * n as f64 * clean.dt,
        landed_g: g,
        saturated: false,
    })
}
