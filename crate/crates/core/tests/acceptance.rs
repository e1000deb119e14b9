//! Acceptance harness: runs every criterion at its stated tolerance, prints
//! one PASS/FAIL line each, and exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use pulseprog::dataset::{generate_dataset, Dataset, DatasetConfig, Norm};
use pulseprog::device::{DeviceParams, DeviceState, Polarity};
use pulseprog::eval::{
    central, delay_benchmark, linspace, one_shot_eval, scaled_targets, wav_sweep, DelayConfig, OneShotConfig,
    SweepReport, WavSweepConfig,
};
use pulseprog::gtmap::{finetune, FinetuneConfig, SmoothedHistory};
use pulseprog::nn::{train, Mlp, TrainConfig};
use pulseprog::oracle::{oracle_pulse_time, OracleConfig};
use pulseprog::predictor::{FixedPulsePredictor, MlpPredictor};
use pulseprog::seed::rng_from_seed;
use rand::Rng;

const SEED: u64 = 42;
const PIPELINE_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

struct Pipeline {
    params: DeviceParams,
    dataset: Dataset,
    dataset_cfg: DatasetConfig,
    finetuned: Mlp,
    oneshot_cfg: OneShotConfig,
    untrained_report: SweepReport,
    scratch_report: SweepReport,
    finetuned_report: SweepReport,
    elapsed: Duration,
}

fn run_pipeline() -> Pipeline {
    let started = Instant::now();
    let params = DeviceParams::default();
    let dataset_cfg = DatasetConfig::default();
    let dataset = generate_dataset(&params, &dataset_cfg, SEED).expect("dataset generation");

    let train_cfg = TrainConfig {
        seed: SEED,
        ..TrainConfig::default()
    };
    let untrained = train_cfg.initial_model().expect("init");
    let (scratch, _) = train(&dataset, &train_cfg).expect("training");
    let ft_cfg = FinetuneConfig {
        seed: SEED,
        ..FinetuneConfig::default()
    };
    let (finetuned, ft_hist) = finetune(&scratch, &dataset, &ft_cfg).expect("fine-tuning");
    eprintln!(
        "fine-tuning: validation RPD_G {:.4} -> {:.4}",
        ft_hist.initial_val_rpd_g, ft_hist.best_val_rpd_g
    );

    let (lo, hi) = dataset_cfg.operational_range(&params);
    let (g_lo, g_hi) = central(lo, hi, 0.8);
    let oneshot_cfg = OneShotConfig {
        n_trials: 1000,
        g_lo,
        g_hi,
        noisy: true,
        ..OneShotConfig::default()
    };
    let sweep = |m: &Mlp| {
        let p = MlpPredictor::new(m.clone(), dataset.norm);
        one_shot_eval(&p, &params, &oneshot_cfg, SEED).expect("one-shot evaluation")
    };
    let finetuned_report = sweep(&finetuned);
    let elapsed = started.elapsed();
    let untrained_report = sweep(&untrained);
    let scratch_report = sweep(&scratch);
    Pipeline {
        params,
        dataset,
        dataset_cfg,
        finetuned,
        oneshot_cfg,
        untrained_report,
        scratch_report,
        finetuned_report,
        elapsed,
    }
}

fn criterion_1(p: &Pipeline) -> Outcome {
    let frac = p.finetuned_report.aggregate.frac_within_50pct;
    Outcome {
        id: "1",
        name: "one-shot accuracy",
        pass: frac >= 0.90 && p.elapsed < PIPELINE_BUDGET,
        detail: format!(
            "frac RPD<50% = {frac:.3} (need >= 0.900) over {} trials in [{:.1}, {:.1}] uS; pipeline {:.1}s (budget {}s)",
            p.oneshot_cfg.n_trials,
            p.oneshot_cfg.g_lo,
            p.oneshot_cfg.g_hi,
            p.elapsed.as_secs_f64(),
            PIPELINE_BUDGET.as_secs()
        ),
    }
}

fn criterion_2(p: &Pipeline) -> Outcome {
    let ft = p.finetuned_report.aggregate.frac_within_50pct;
    let sc = p.scratch_report.aggregate.frac_within_50pct;
    let sc_rpd = p.scratch_report.aggregate.mean_rpd;
    let un_rpd = p.untrained_report.aggregate.mean_rpd;
    let ratio = un_rpd / sc_rpd;
    Outcome {
        id: "2",
        name: "fine-tuning improvement ordering",
        pass: ft > sc && ratio >= 10.0,
        detail: format!(
            "frac fine-tuned {ft:.3} vs scratch {sc:.3} (need strictly greater); mean RPD fine-tuned {:.4}, \
             scratch {sc_rpd:.4}, untrained {un_rpd:.4}, untrained/scratch = {ratio:.2}x (need >= 10x)",
            p.finetuned_report.aggregate.mean_rpd
        ),
    }
}

fn criterion_3(p: &Pipeline) -> Outcome {
    let pred = MlpPredictor::new(p.finetuned.clone(), p.dataset.norm);
    let (lo, hi) = p.dataset_cfg.operational_range(&p.params);
    let cfg = WavSweepConfig {
        g_starts: linspace(lo, hi, 13),
        targets: scaled_targets(&p.params),
        ..WavSweepConfig::default()
    };
    let rep = wav_sweep(&pred, &p.params, &cfg, SEED).expect("wav sweep");
    let mut pass = true;
    let mut parts = Vec::new();
    for t in &rep.targets {
        let dev = (t.mean_converged - t.g_target).abs();
        pass &= t.frac_in_window >= 0.90 && dev <= 25.0;
        parts.push(format!(
            "{:.0} uS: in-window by iter {} {:.3}, |mean-target| {:.2}",
            t.g_target, cfg.window_within_iters, t.frac_in_window, dev
        ));
    }
    Outcome {
        id: "3",
        name: "write-and-verify convergence",
        pass,
        detail: format!("{} (need >= 0.90 and <= 25 uS)", parts.join("; ")),
    }
}

fn criterion_4(p: &Pipeline) -> Outcome {
    let pred = MlpPredictor::new(p.finetuned.clone(), p.dataset.norm);
    let baseline = FixedPulsePredictor::new(50.0 * p.params.dt);
    let (lo, hi) = p.dataset_cfg.operational_range(&p.params);
    let cfg = DelayConfig {
        targets: scaled_targets(&p.params),
        g_starts: linspace(lo, hi, 13),
        ..DelayConfig::default()
    };
    let rep = delay_benchmark(&pred, &baseline, &p.params, &cfg, SEED).expect("delay benchmark");
    let pass = rep.rows.iter().all(|r| r.predictor.mean_iterations < r.baseline.mean_iterations);
    let parts: Vec<String> = rep
        .rows
        .iter()
        .map(|r| {
            format!(
                "{:.0} uS: {:.2} vs {:.2} iterations",
                r.g_target, r.predictor.mean_iterations, r.baseline.mean_iterations
            )
        })
        .collect();
    Outcome {
        id: "4",
        name: "delay ordering vs 500 ns fixed pulse",
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_5() -> Outcome {
    const DRAWS: usize = 200;
    let mut rng = rng_from_seed(SEED);
    let mut failures = Vec::new();
    for draw in 0..DRAWS {
        let params = common::random_params(&mut rng);
        let x0 = rng.random_range(0.0..1.0);
        let (a, b) = (rng.random_range(0..5000), rng.random_range(0..5000));
        let checks = [
            common::check_monotone(&params, x0, Polarity::Set, 2000),
            common::check_monotone(&params, x0, Polarity::Reset, 2000),
            common::check_additive(&params, x0, Polarity::Set, a, b),
            common::check_additive(&params, x0, Polarity::Reset, a, b),
            common::check_s_shape(&params, Polarity::Set),
            common::check_s_shape(&params, Polarity::Reset),
            common::check_confined(&params, &mut rng, 20),
            common::check_slow_near_boundaries(&params),
        ];
        failures.extend(checks.into_iter().filter_map(Result::err).map(|e| format!("draw {draw}: {e}")));
    }
    Outcome {
        id: "5",
        name: "device-model property suite",
        pass: failures.is_empty(),
        detail: format!(
            "{DRAWS} parameter draws x 8 checks, {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    }
}

fn criterion_6(p: &Pipeline) -> Outcome {
    let mut rng = rng_from_seed(SEED);
    // (a) MLP analytic vs central differences.
    let mut worst_mlp: f64 = 0.0;
    let mut tested = 0;
    for i in 0..200u64 {
        let sizes: &[usize] = match i % 3 {
            0 => &[2, 1],
            1 => &[2, 3, 1],
            _ => &[2, 4, 4, 1],
        };
        let mlp = Mlp::new(sizes, i).expect("mlp");
        let x = [rng.random_range(0.0..1.5), rng.random_range(-1.0..1.0)];
        if let Some(e) = common::mlp_gradient_rel_error(&mlp, x, rng.random_range(0.0..1.0), 1e-6) {
            worst_mlp = worst_mlp.max(e);
            tested += 1;
        }
    }
    // (b) and (c) on recorded histories at every scheduled kernel.
    let norm: Norm = p.dataset.norm;
    let mut worst_map: f64 = 0.0;
    let mut range_failures = Vec::new();
    let mut histories = 0;
    for s in p.dataset.samples.iter().step_by(250) {
        for k in [1, 11, 101, 1001] {
            let sh = SmoothedHistory::new(&s.history, k).expect("smoothing");
            match common::gtmap_fd_max_error(&sh, &norm, &mut rng, 25) {
                Ok(e) => worst_map = worst_map.max(e),
                Err(e) => range_failures.push(e),
            }
            if let Err(e) = common::check_out_of_range_grad(&sh, &norm) {
                range_failures.push(e);
            }
            histories += 1;
        }
    }
    Outcome {
        id: "6",
        name: "gradient suites",
        pass: tested > 0 && worst_mlp <= 1e-4 && worst_map <= 1e-6 && range_failures.is_empty(),
        detail: format!(
            "(a) {tested} networks, max rel err {worst_mlp:.2e} (need <= 1e-4); (b) {histories} smoothed histories, \
             max abs err {worst_map:.2e} (need <= 1e-6); (c) out-of-range gradient failures {}",
            range_failures.len()
        ),
    }
}

fn criterion_7(p: &Pipeline) -> Outcome {
    let cfg = OracleConfig::default();
    let clean = p.params.noise_free();
    let (lo, hi) = p.dataset_cfg.operational_range(&p.params);
    let grid = linspace(lo, hi, 20);
    let mut misses = Vec::new();
    for &g0 in &grid {
        for &g1 in &grid {
            let landed = oracle_pulse_time(&p.params, g0, g1 - g0, &cfg).and_then(|sol| {
                let mut d = DeviceState::with_conductance(&clean, 0, g0)?;
                if let Some(pol) = Polarity::from_sign(sol.time_ns) {
                    d.apply_pulse(&clean, pol, sol.time_ns.abs(), false)?;
                }
                Ok(d.read_conductance())
            });
            match landed {
                Ok(g) if (g - g1).abs() <= cfg.tol_g => {}
                other => misses.push(format!("({g0:.1} -> {g1:.1}): {other:?}")),
            }
        }
    }
    Outcome {
        id: "7",
        name: "oracle round trip",
        pass: misses.is_empty(),
        detail: format!(
            "{} of {} cells land within {} uS{}",
            grid.len() * grid.len() - misses.len(),
            grid.len() * grid.len(),
            cfg.tol_g,
            misses.first().map(|m| format!(" (first miss {m})")).unwrap_or_default()
        ),
    }
}

fn criterion_8(p: &Pipeline) -> Outcome {
    let ds = &p.dataset;
    let mut sign_violations = 0;
    let mut straddle_violations = 0;
    for s in &ds.samples {
        let h = &s.history;
        let end = s.end_index();
        let dg = s.g_target - s.g_start;
        if s.t_pulse.signum() != dg.signum() || h.polarity != Polarity::from_sign(dg).expect("non-zero gap") {
            sign_violations += 1;
        }
        let t = s.g_target;
        let crosses = |a: f64, b: f64| (a - t) * (b - t) <= 0.0;
        let ok = h.len() == 2 * end + 1
            && h.g[end] == s.g_end
            && [end.checked_sub(1), Some(end + 1)].into_iter().flatten().any(|o| {
                o < h.len() && {
                    let (a, b) = if o < end { (h.g[o], h.g[end]) } else { (h.g[end], h.g[o]) };
                    crosses(a, b) && (s.g_end - t).abs() <= (h.g[o] - t).abs()
                }
            });
        if !ok {
            straddle_violations += 1;
        }
    }
    let rate = ds.stats.rejection_rate();
    let sizes = (ds.split.train.len(), ds.split.val.len(), ds.split.test.len());
    let again = generate_dataset(&p.params, &p.dataset_cfg, SEED).expect("regeneration");
    let identical = again.samples_bytes() == ds.samples_bytes()
        && again.split == ds.split
        && again.norm == ds.norm;
    Outcome {
        id: "8",
        name: "dataset invariants",
        pass: ds.samples.len() == 10_000
            && sign_violations == 0
            && straddle_violations == 0
            && rate < 0.05
            && sizes == (8000, 1000, 1000)
            && identical,
        detail: format!(
            "{} samples, sign violations {sign_violations}, straddle violations {straddle_violations}, \
             rejection rate {:.2}% (need < 5%), split {}/{}/{}, byte-identical regeneration {identical}",
            ds.samples.len(),
            rate * 100.0,
            sizes.0,
            sizes.1,
            sizes.2
        ),
    }
}

fn main() -> ExitCode {
    // libtest-style filter arguments are accepted and ignored.
    let pipeline = run_pipeline();
    let outcomes = [
        criterion_1(&pipeline),
        criterion_2(&pipeline),
        criterion_3(&pipeline),
        criterion_4(&pipeline),
        criterion_5(),
        criterion_6(&pipeline),
        criterion_7(&pipeline),
        criterion_8(&pipeline),
    ];
    for o in &outcomes {
        println!(
            "criterion {} [{}] {}: {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
