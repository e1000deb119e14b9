//! Pulse predictors behind one trait, looked up by name at runtime.
//!
//! Built-in strategies:
//!
//! * `mlp`: a trained [`Checkpoint`];
//! * `oracle`: the noise-free model solved per call;
//! * `fixed-pulse`: a constant-length pulse in the needed direction, the
//!   classical write-and-verify baseline.

use std::collections::BTreeMap;

use crate::dataset::{Kind, Norm};
use crate::device::DeviceParams;
use crate::eval::EvalError;
use crate::nn::{Checkpoint, Mlp};
use crate::oracle::{oracle_pulse_time, OracleConfig};

/// Maps the current reading and the desired change to a signed pulse time
/// (ns). Positive is SET, negative RESET, zero means no pulse.
pub trait PulsePredictor: Send + Sync {
    fn name(&self) -> &str;
    fn predict(&self, g_now: f64, delta_g: f64) -> f64;
}

pub struct MlpPredictor {
    mlp: Mlp,
    norm: Norm,
}

impl MlpPredictor {
    pub fn new(mlp: Mlp, norm: Norm) -> Self {
        Self { mlp, norm }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, EvalError> {
        Ok(Self::new(ck.mlp()?, ck.norm))
    }
}

impl PulsePredictor for MlpPredictor {
    fn name(&self) -> &str {
        "mlp"
    }

    fn predict(&self, g_now: f64, delta_g: f64) -> f64 {
        let t_norm = self.mlp.predict(self.norm.g(g_now), self.norm.g(delta_g));
        self.norm.denormalize(t_norm, Kind::T)
    }
}

/// Noise-free baseline. Readings of a drifted device can fall outside the
/// nominal range; both ends are clamped into it before solving.
pub struct OraclePredictor {
    params: DeviceParams,
    cfg: OracleConfig,
}

impl OraclePredictor {
    pub fn new(params: DeviceParams, cfg: OracleConfig) -> Self {
        Self { params, cfg }
    }
}

impl PulsePredictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, g_now: f64, delta_g: f64) -> f64 {
        let (lo, hi) = (self.params.g_min_nominal, self.params.g_max_nominal);
        let g = g_now.clamp(lo, hi);
        let target = (g_now + delta_g).clamp(lo, hi);
        match oracle_pulse_time(&self.params, g, target - g, &self.cfg) {
            Ok(sol) => sol.time_ns,
            Err(e) => {
                log::warn!("oracle predictor: {e}");
                f64::NAN
            }
        }
    }
}

pub struct FixedPulsePredictor {
    pulse_ns: f64,
}

impl FixedPulsePredictor {
    pub fn new(pulse_ns: f64) -> Self {
        Self { pulse_ns }
    }
}

impl PulsePredictor for FixedPulsePredictor {
    fn name(&self) -> &str {
        "fixed-pulse"
    }

    fn predict(&self, _g_now: f64, delta_g: f64) -> f64 {
        if delta_g == 0.0 {
            0.0
        } else {
            delta_g.signum() * self.pulse_ns
        }
    }
}

/// Everything a factory may need to build its predictor.
pub struct PredictorContext<'a> {
    pub params: &'a DeviceParams,
    pub oracle: &'a OracleConfig,
    pub checkpoint: Option<&'a Checkpoint>,
    pub fixed_pulse_ns: f64,
}

pub type PredictorFactory = fn(&PredictorContext<'_>) -> Result<Box<dyn PulsePredictor>, EvalError>;

pub struct PredictorRegistry {
    factories: BTreeMap<String, PredictorFactory>,
}

impl Default for PredictorRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl PredictorRegistry {
    /// Registry with the built-in predictors.
    pub fn new() -> Self {
        let mut reg = Self {
            factories: BTreeMap::new(),
        };
        reg.register("mlp", |ctx| {
            let ck = ctx
                .checkpoint
                .ok_or_else(|| EvalError::Config("predictor `mlp` needs a model checkpoint".into()))?;
            Ok(Box::new(MlpPredictor::from_checkpoint(ck)?))
        });
        reg.register("oracle", |ctx| {
            Ok(Box::new(OraclePredictor::new(ctx.params.clone(), ctx.oracle.clone())))
        });
        reg.register("fixed-pulse", |ctx| {
            if !(ctx.fixed_pulse_ns > 0.0) {
                return Err(EvalError::Config("fixed pulse length must be positive".into()));
            }
            Ok(Box::new(FixedPulsePredictor::new(ctx.fixed_pulse_ns)))
        });
        reg
    }

    pub fn register(&mut self, name: &str, factory: PredictorFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(
        &self,
        name: &str,
        ctx: &PredictorContext<'_>,
    ) -> Result<Box<dyn PulsePredictor>, EvalError> {
        let factory = self.factories.get(name).ok_or_else(|| {
            EvalError::UnknownPredictor(name.to_string(), self.names().collect::<Vec<_>>().join(", "))
        })?;
        factory(ctx)
    }
}
