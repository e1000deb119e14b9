//! Checks shared by the property tests and the acceptance harness. Each
//! returns `Err(description)` on the first violation.

#![allow(dead_code)]

use pulseprog::dataset::{History, Norm};
use pulseprog::device::{DeviceParams, DeviceState, Polarity};
use pulseprog::gtmap::SmoothedHistory;
use pulseprog::nn::{Grads, Mlp, Trace};
use rand::Rng;

/// Randomized device parameters. Documented ranges:
/// g_min in [10, 100] µS, g_max - g_min in [100, 600] µS,
/// k_set in [3e-5, 5e-4] /ns, k_reset / k_set in [1, 4],
/// eps_floor in [0.001, 0.05], dt in [1, 20] ns, default noise.
pub fn random_params<R: Rng>(rng: &mut R) -> DeviceParams {
    let g_min = rng.random_range(10.0..100.0);
    let k_set = rng.random_range(3e-5..5e-4);
    DeviceParams {
        g_min_nominal: g_min,
        g_max_nominal: g_min + rng.random_range(100.0..600.0),
        k_set,
        k_reset: k_set * rng.random_range(1.0..4.0),
        eps_floor: rng.random_range(0.001..0.05),
        dt: rng.random_range(1.0..20.0),
        ..DeviceParams::default()
    }
}

fn clean_at(params: &DeviceParams, x: f64) -> (DeviceParams, DeviceState) {
    let clean = params.noise_free();
    let mut d = DeviceState::new(&clean, 0).expect("valid params");
    d.set_x(x);
    (clean, d)
}

/// Noise-free SET never lowers G and RESET never raises it, step by step.
pub fn check_monotone(params: &DeviceParams, x0: f64, polarity: Polarity, steps: u64) -> Result<(), String> {
    let (clean, mut d) = clean_at(params, x0);
    let mut g = d.read_conductance();
    for i in 0..steps {
        d.step(&clean, polarity, false);
        let now = d.read_conductance();
        if (now - g) * polarity.sign() < 0.0 {
            return Err(format!("{polarity:?} step {i} from x0={x0}: {g} -> {now}"));
        }
        g = now;
    }
    Ok(())
}

/// Two noise-free pulses of `a` and `b` steps leave exactly the state of
/// one pulse of `a + b` steps.
pub fn check_additive(params: &DeviceParams, x0: f64, polarity: Polarity, a: u64, b: u64) -> Result<(), String> {
    let (clean, start) = clean_at(params, x0);
    let dt = clean.dt;
    let mut split = start.clone();
    let n1 = split.apply_pulse(&clean, polarity, a as f64 * dt, false).map_err(|e| e.to_string())?;
    let n2 = split.apply_pulse(&clean, polarity, b as f64 * dt, false).map_err(|e| e.to_string())?;
    let mut whole = start;
    let n = whole.apply_pulse(&clean, polarity, (a + b) as f64 * dt, false).map_err(|e| e.to_string())?;
    if n1 + n2 != n || split != whole {
        return Err(format!(
            "{polarity:?} x0={x0} a={a} b={b}: steps {n1}+{n2} vs {n}, G {} vs {}",
            split.read_conductance(),
            whole.read_conductance()
        ));
    }
    Ok(())
}

/// Per-step |ΔG| of a noise-free transit from one boundary rises to a
/// single interior maximum, then falls.
pub fn check_s_shape(params: &DeviceParams, polarity: Polarity) -> Result<(), String> {
    let x0 = if polarity == Polarity::Set { 0.01 } else { 0.99 };
    let (clean, mut d) = clean_at(params, x0);
    let mut incs = Vec::new();
    let mut g = d.read_conductance();
    for _ in 0..2 * clean.transit_steps(polarity) {
        d.step(&clean, polarity, false);
        let now = d.read_conductance();
        incs.push((now - g).abs());
        g = now;
    }
    let peak = incs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    if peak == 0 || peak + 1 >= incs.len() {
        return Err(format!("{polarity:?}: maximum at trace edge (step {peak})"));
    }
    if let Some(i) = (1..=peak).find(|&i| incs[i] < incs[i - 1]) {
        return Err(format!("{polarity:?}: increment falls at step {i} before peak {peak}"));
    }
    if let Some(i) = (peak + 1..incs.len()).find(|&i| incs[i] > incs[i - 1]) {
        return Err(format!("{polarity:?}: increment rises at step {i} after peak {peak}"));
    }
    Ok(())
}

/// Readings stay within the drifting bounds through a random noisy pulse
/// sequence.
pub fn check_confined<R: Rng>(params: &DeviceParams, rng: &mut R, pulses: usize) -> Result<(), String> {
    let mut d = DeviceState::new(params, rng.random()).map_err(|e| e.to_string())?;
    for i in 0..pulses {
        let pol = if rng.random_bool(0.5) { Polarity::Set } else { Polarity::Reset };
        let steps = rng.random_range(0..params.transit_steps(pol));
        d.apply_pulse(params, pol, steps as f64 * params.dt, true).map_err(|e| e.to_string())?;
        let g = d.read_conductance();
        let (lo, hi) = d.bounds();
        if !(lo <= g && g <= hi) {
            return Err(format!("pulse {i}: G={g} outside [{lo}, {hi}]"));
        }
    }
    Ok(())
}

/// One noise-free step moves G less at x = 0.02 and x = 0.98 than at 0.5.
pub fn check_slow_near_boundaries(params: &DeviceParams) -> Result<(), String> {
    for pol in [Polarity::Set, Polarity::Reset] {
        let inc = |x: f64| {
            let (clean, mut d) = clean_at(params, x);
            let g = d.read_conductance();
            d.step(&clean, pol, false);
            (d.read_conductance() - g).abs()
        };
        let mid = inc(0.5);
        for x in [0.02, 0.98] {
            let edge = inc(x);
            if !(edge < mid) {
                return Err(format!("{pol:?}: |ΔG| at x={x} is {edge}, at 0.5 is {mid}"));
            }
        }
    }
    Ok(())
}

/// Loss for a single sample: `(forward - y)^2`.
fn sample_loss(mlp: &Mlp, x: &[f64; 2], y: f64) -> f64 {
    (mlp.forward(x) - y).powi(2)
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of the squared error, or `None` when the probe lands within
/// `h` of a ReLU kink and the difference quotient is not meaningful.
pub fn mlp_gradient_rel_error(mlp: &Mlp, x: [f64; 2], y: f64, h: f64) -> Option<f64> {
    let mut trace = Trace::default();
    let mut grads = Grads::zeros_like(mlp);
    let err = mlp.forward_trace(&x, &mut trace) - y;
    mlp.backward_trace(&mut trace, 2.0 * err, &mut grads);
    let analytic = grads.flat();

    let base = mlp.flat_params();
    let mut probe = mlp.clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_flat_params(&p);
        let up = sample_loss(&probe, &x, y);
        let pre_up = pre_activations(&probe, &x);
        p[i] = base[i] - h;
        probe.set_flat_params(&p);
        let down = sample_loss(&probe, &x, y);
        let pre_down = pre_activations(&probe, &x);
        // A sign change in any hidden pre-activation means a kink was crossed.
        if pre_up.iter().zip(&pre_down).any(|(a, b)| a * b <= 0.0) {
            return None;
        }
        numeric.push((up - down) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    Some(if scale == 0.0 { 0.0 } else { diff / scale })
}

/// Hidden-layer pre-activations, layer after layer.
fn pre_activations(mlp: &Mlp, x: &[f64; 2]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut a = x.to_vec();
    let sizes = &mlp.layer_sizes;
    for l in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let z: Vec<f64> = (0..n_out)
            .map(|o| mlp.biases[l][o] + (0..n_in).map(|i| mlp.weights[l][o * n_in + i] * a[i]).sum::<f64>())
            .collect();
        if l + 2 < sizes.len() {
            out.extend_from_slice(&z);
            a = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    out
}

/// Central difference of the map at interior points of randomly chosen
/// segments against the returned raw slope. Returns the largest absolute
/// error seen.
pub fn gtmap_fd_max_error<R: Rng>(sh: &SmoothedHistory, norm: &Norm, rng: &mut R, probes: usize) -> Result<f64, String> {
    let h = &sh.history;
    let n = h.len();
    if n < 2 {
        return Ok(0.0);
    }
    // One segment in normalized time.
    let seg = h.dt / (2.0 * norm.t_ref);
    let t_first = norm.t(if h.polarity == Polarity::Set { 0.0 } else { -((n - 1) as f64) * h.dt });
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let j = rng.random_range(0..n - 1);
        let t = t_first + (j as f64 + rng.random_range(0.2..0.8)) * seg;
        let eps = 0.05 * seg;
        let (_, slope) = sh.eval(t, norm);
        let slope = slope.ok_or_else(|| format!("no slope inside range at segment {j}"))?;
        let fd = (sh.map_t_to_g(t + eps, norm) - sh.map_t_to_g(t - eps, norm)) / (2.0 * eps);
        worst = worst.max((fd - slope).abs());
    }
    Ok(worst)
}

/// Gradient exactly 1 below and above the recorded range.
pub fn check_out_of_range_grad(sh: &SmoothedHistory, norm: &Norm) -> Result<(), String> {
    let h: &History = sh.history;
    // Recorded signed times lie within [-span, span] for either polarity.
    let span = (h.len() as f64) * h.dt;
    for t in [-span - h.dt, span + h.dt, -1e9, 1e9] {
        let g = sh.map_t_to_g_grad(norm.t(t), norm);
        if g != 1.0 {
            return Err(format!("gradient {g} at t={t} ns outside the recorded range"));
        }
    }
    Ok(())
}
