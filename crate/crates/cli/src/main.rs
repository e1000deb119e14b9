use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use pulseprog::device::Polarity;
use pulseprog::gtmap::KernelSchedule;
use pulseprog::nn::CheckpointMetric;
use pulseprog_cli::config::{RunConfig, StageName};
use pulseprog_cli::stages;

const EXIT_USAGE: u8 = 1;
const EXIT_STAGE: u8 = 2;

/// Simulate memristors, train a neural pulse predictor, and evaluate it.
#[derive(Parser)]
#[command(name = "pulseprog", version)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Switching curves of fresh devices (`device.switching_curve`).
    SimulateDevice {
        #[arg(long)]
        pulses: Option<usize>,
        #[arg(long)]
        devices: Option<usize>,
        /// `set` or `reset`; repeat for both.
        #[arg(long, value_parser = parse_polarity)]
        polarity: Vec<Polarity>,
        #[arg(long)]
        noise_free: bool,
    },
    /// Generate the pulse-time dataset (`dataset`).
    GenDataset {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the predictor from scratch on pulse time (`train`).
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, value_parser = ["t", "g"])]
        checkpoint_metric: Option<String>,
    },
    /// Fine-tune through smoothed conductance histories (`finetune`).
    Finetune {
        /// Kernel schedule, e.g. `1001:50,101:50,11:50,1:50`.
        #[arg(long)]
        schedule: Option<KernelSchedule>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// One-shot programming sweep (`eval.oneshot`).
    EvalOneshot {
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// A single write-and-verify run (`eval.wav`).
    Wav {
        #[arg(long)]
        g_start: Option<f64>,
        #[arg(long)]
        g_target: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        window: Option<f64>,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Write-and-verify over a start grid and targets (`eval.wav_sweep`).
    WavSweep {
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Verify iterations against the fixed-pulse baseline (`eval.delay`).
    DelayBench {
        /// Baseline pulse length in ns (`eval.fixed_pulse_ns`).
        #[arg(long)]
        baseline_pulse_ns: Option<f64>,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Run the configured stages (`stages`).
    Pipeline {
        /// Comma-separated stage names.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<StageName>,
    },
}

#[derive(Args)]
struct PredictorArgs {
    /// `mlp`, `oracle` or `fixed-pulse` (`eval.predictor`).
    #[arg(long)]
    predictor: Option<String>,
    /// Model checkpoint for `mlp` (`eval.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl PredictorArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if let Some(p) = self.predictor {
            cfg.eval.predictor = p;
        }
        if let Some(c) = self.checkpoint {
            cfg.eval.checkpoint = Some(c);
        }
    }
}

fn parse_polarity(s: &str) -> Result<Polarity, String> {
    match s {
        "set" => Ok(Polarity::Set),
        "reset" => Ok(Polarity::Reset),
        _ => Err(format!("expected `set` or `reset`, got `{s}`")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Apply flags onto the config; returns the stages to run.
fn apply(command: Command, cfg: &mut RunConfig) -> anyhow::Result<Vec<StageName>> {
    Ok(match command {
        Command::SimulateDevice {
            pulses,
            devices,
            polarity,
            noise_free,
        } => {
            let sc = &mut cfg.device.switching_curve;
            set(&mut sc.pulses, pulses);
            set(&mut sc.devices, devices);
            if !polarity.is_empty() {
                sc.polarities = polarity;
            }
            if noise_free {
                sc.noisy = false;
            }
            vec![StageName::SwitchingCurve]
        }
        Command::GenDataset { samples } => {
            set(&mut cfg.dataset.n_samples, samples);
            vec![StageName::Dataset]
        }
        Command::Train {
            epochs,
            lr,
            batch,
            checkpoint_metric,
        } => {
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.learning_rate, lr);
            set(&mut cfg.train.batch_size, batch);
            if let Some(m) = checkpoint_metric {
                cfg.train.checkpoint_metric = m.parse::<CheckpointMetric>().map_err(anyhow::Error::msg)?;
            }
            vec![StageName::Train]
        }
        Command::Finetune { schedule, lr } => {
            set(&mut cfg.finetune.schedule, schedule);
            set(&mut cfg.finetune.learning_rate, lr);
            vec![StageName::Finetune]
        }
        Command::EvalOneshot { trials, predictor } => {
            set(&mut cfg.eval.oneshot.n_trials, trials);
            predictor.apply(cfg);
            vec![StageName::OneShot]
        }
        Command::Wav {
            g_start,
            g_target,
            max_iter,
            window,
            predictor,
        } => {
            let w = &mut cfg.eval.wav;
            set(&mut w.g_start, g_start);
            set(&mut w.g_target, g_target);
            set(&mut w.max_iter, max_iter);
            set(&mut w.window, window);
            predictor.apply(cfg);
            vec![StageName::Wav]
        }
        Command::WavSweep { repeats, predictor } => {
            set(&mut cfg.eval.wav_sweep.repeats, repeats);
            predictor.apply(cfg);
            vec![StageName::WavSweep]
        }
        Command::DelayBench {
            baseline_pulse_ns,
            predictor,
        } => {
            set(&mut cfg.eval.fixed_pulse_ns, baseline_pulse_ns);
            predictor.apply(cfg);
            vec![StageName::Delay]
        }
        Command::Pipeline { stages } => {
            if !stages.is_empty() {
                cfg.stages = stages;
            }
            cfg.stages.clone()
        }
    })
}

fn prepare(cli: Cli) -> anyhow::Result<(RunConfig, Vec<StageName>)> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out, cli.out);
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring --jobs")?;
    }
    let targets = apply(cli.command, &mut cfg)?;
    if targets.is_empty() {
        anyhow::bail!("no stages selected");
    }
    Ok((cfg.resolve()?, targets))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (cfg, targets) = match prepare(cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match stages::run(&cfg, &targets) {
        Ok(manifest) => {
            let files: usize = manifest.stages.iter().map(|s| s.files.len()).sum();
            log::info!(
                "done: {} stages, {files} files recorded in {}",
                manifest.stages.len(),
                pulseprog_cli::manifest::Manifest::path(&cfg.out).display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
