//! Stage execution. Each stage writes only its own files into the output
//! directory and is skipped when the manifest already records the same
//! fingerprint with intact files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use pulseprog::dataset::{generate_dataset, sha256_hex, Dataset};
use pulseprog::device::switching_curve;
use pulseprog::eval::{delay_benchmark, one_shot_eval, wav_sweep, write_and_verify};
use pulseprog::gtmap::finetune;
use pulseprog::nn::{train, Checkpoint};
use pulseprog::predictor::{PredictorContext, PredictorRegistry, PulsePredictor};

use crate::config::{with_prerequisites, RunConfig, StageName};
use crate::manifest::{FileRecord, Manifest, StageRecord, Verified};

const DATASET: &str = "dataset";
const SWITCHING_CSV: &str = "switching_curve.csv";
const DATASET_CSV: &str = "dataset.csv";
const SCRATCH_MODEL: &str = "model_scratch.json";
const TRAIN_CSV: &str = "train_history.csv";
const TRAIN_SUMMARY: &str = "train_summary.json";
const FINETUNED_MODEL: &str = "model_finetuned.json";
const FINETUNE_CSV: &str = "finetune_history.csv";
const FINETUNE_SUMMARY: &str = "finetune_summary.json";
const ONESHOT_TRIALS: &str = "oneshot_trials.csv";
const ONESHOT_CELLS: &str = "oneshot_cells.csv";
const ONESHOT_SUMMARY: &str = "oneshot_summary.json";
const WAV_CSV: &str = "wav_trajectory.csv";
const WAV_SUMMARY: &str = "wav_summary.json";
const SWEEP_CELLS: &str = "wav_sweep_cells.csv";
const SWEEP_TRAJ: &str = "wav_sweep_trajectories.csv";
const SWEEP_SUMMARY: &str = "wav_sweep_summary.json";
const DELAY_CSV: &str = "delay.csv";
const DELAY_SUMMARY: &str = "delay_summary.json";

/// A failed run: the stage it failed in, if any, and why.
#[derive(Debug)]
pub struct RunFailure {
    pub stage: Option<StageName>,
    pub error: anyhow::Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage `{s}` failed: {:#}", self.error),
            None => write!(f, "{:#}", self.error),
        }
    }
}

impl std::error::Error for RunFailure {}

/// Run `targets` and their prerequisites. The manifest is rewritten after
/// every stage, so a failure leaves the completed stages recorded.
pub fn run(cfg: &RunConfig, targets: &[StageName]) -> Result<Manifest, RunFailure> {
    let setup = |error: anyhow::Error| RunFailure { stage: None, error };
    let out = cfg.out.clone();
    fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))
        .map_err(setup)?;
    let mut manifest = Manifest::load(&out).map_err(setup)?.unwrap_or_else(|| Manifest::new(cfg.seed));
    manifest.seed = cfg.seed;
    manifest.failed = None;

    let runner = Runner { cfg, out: &out };
    for stage in with_prerequisites(cfg, targets) {
        let result = runner.fingerprint(stage, &manifest).and_then(|fp| {
            if let Some(rec) = manifest.get(stage).filter(|r| r.fingerprint == fp) {
                match rec.verify(&out)? {
                    Verified::Intact => {
                        info!("{stage}: up to date, skipped");
                        return Ok(None);
                    }
                    Verified::Missing(p) => info!("{stage}: {} missing, re-running", p.display()),
                }
            }
            info!("{stage}: running");
            let files = runner.execute(stage)?;
            let files = files
                .iter()
                .map(|f| FileRecord::hash(&out, f))
                .collect::<anyhow::Result<Vec<_>>>()?;
            Ok(Some(StageRecord {
                stage,
                fingerprint: fp,
                files,
            }))
        });
        match result {
            Ok(Some(record)) => {
                manifest.upsert(record);
                manifest.save(&out).map_err(setup)?;
            }
            Ok(None) => {}
            Err(error) => {
                manifest.remove(stage);
                manifest.failed = Some(crate::manifest::Failure {
                    stage,
                    error: format!("{error:#}"),
                });
                // The stage error is what matters; a failed manifest write
                // is logged rather than replacing it.
                if let Err(e) = manifest.save(&out) {
                    log::error!("could not record failure in manifest: {e:#}");
                }
                return Err(RunFailure {
                    stage: Some(stage),
                    error,
                });
            }
        }
    }
    manifest.save(&out).map_err(setup)?;
    Ok(manifest)
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
}

fn hash_json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(v)?))
}

fn write_file(out: &Path, name: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let path = out.join(name);
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(out: &Path, name: &str, v: &T) -> anyhow::Result<()> {
    write_file(out, name, |w| {
        serde_json::to_writer_pretty(&mut *w, v)?;
        w.write_all(b"\n")
    })
}

impl Runner<'_> {
    /// Hash of everything the stage's output depends on.
    fn fingerprint(&self, stage: StageName, manifest: &Manifest) -> anyhow::Result<String> {
        let cfg = self.cfg;
        let section = match stage {
            StageName::SwitchingCurve => json!(cfg.device),
            StageName::Dataset => json!({ "device": cfg.device.params, "dataset": cfg.dataset }),
            StageName::Train => json!(cfg.train),
            StageName::Finetune => json!(cfg.finetune),
            StageName::OneShot => json!(cfg.eval.oneshot),
            StageName::Wav => json!(cfg.eval.wav),
            StageName::WavSweep => json!(cfg.eval.wav_sweep),
            StageName::Delay => json!({ "delay": cfg.eval.delay, "baseline_ns": cfg.eval.fixed_pulse_ns }),
        };
        let mut inputs = Vec::new();
        for dep in stage.direct_inputs(cfg) {
            let rec = manifest
                .get(dep)
                .ok_or_else(|| anyhow!("input stage `{dep}` has no recorded artifacts"))?;
            inputs.push(json!({ "stage": dep, "files": rec.files }));
        }
        if stage.is_eval() {
            inputs.push(json!({ "predictor": self.predictor_identity()? }));
        }
        hash_json(&json!({
            "stage": stage,
            "seed": cfg.seed,
            "config": section,
            "inputs": inputs,
        }))
    }

    fn execute(&self, stage: StageName) -> anyhow::Result<Vec<String>> {
        let files: Vec<&str> = match stage {
            StageName::SwitchingCurve => self.switching_curve()?,
            StageName::Dataset => self.dataset()?,
            StageName::Train => self.train()?,
            StageName::Finetune => self.finetune()?,
            StageName::OneShot => self.oneshot()?,
            StageName::Wav => self.wav()?,
            StageName::WavSweep => self.wav_sweep()?,
            StageName::Delay => self.delay()?,
        };
        Ok(files.into_iter().map(String::from).collect())
    }

    fn switching_curve(&self) -> anyhow::Result<Vec<&'static str>> {
        let dev = &self.cfg.device;
        let sc = &dev.switching_curve;
        let mut curves = Vec::new();
        for &pol in &sc.polarities {
            curves.push((pol, switching_curve(&dev.params, sc.pulses, sc.devices, pol, sc.noisy, self.cfg.seed)?));
        }
        let dt = dev.params.dt;
        write_file(self.out, SWITCHING_CSV, |w| {
            writeln!(w, "polarity,device,pulse,time_ns,g_uS")?;
            for (pol, traces) in &curves {
                let name = if pol.sign() > 0.0 { "set" } else { "reset" };
                for (d, trace) in traces.iter().enumerate() {
                    for (i, g) in trace.iter().enumerate() {
                        writeln!(w, "{name},{d},{},{},{g}", i + 1, (i + 1) as f64 * dt)?;
                    }
                }
            }
            Ok(())
        })?;
        Ok(vec![SWITCHING_CSV])
    }

    fn dataset(&self) -> anyhow::Result<Vec<&'static str>> {
        let ds = generate_dataset(&self.cfg.device.params, &self.cfg.dataset, self.cfg.seed)?;
        info!(
            "dataset: {} samples, {} rejected attempts, t_ref {:.0} ns",
            ds.samples.len(),
            ds.stats.rejections(),
            ds.norm.t_ref
        );
        ds.save(self.out, DATASET)?;
        write_file(self.out, DATASET_CSV, |w| ds.write_csv(w))?;
        Ok(vec!["dataset.meta.json", "dataset.samples.bin", DATASET_CSV])
    }

    fn load_dataset(&self) -> anyhow::Result<Dataset> {
        Ok(Dataset::load(self.out, DATASET)?)
    }

    fn dataset_sha(&self) -> anyhow::Result<String> {
        let bytes = fs::read(self.out.join("dataset.meta.json")).context("reading dataset.meta.json")?;
        Ok(sha256_hex(&bytes))
    }

    fn train(&self) -> anyhow::Result<Vec<&'static str>> {
        let ds = self.load_dataset()?;
        let (mlp, hist) = train(&ds, &self.cfg.train)?;
        let best = hist.best();
        info!(
            "train: best epoch {} val RPD_T {:.4} RPD_G {:.4}",
            best.epoch, best.val.rpd_t, best.val.rpd_g
        );
        let provenance = json!({
            "stage": StageName::Train,
            "seed": self.cfg.seed,
            "dataset_meta_sha256": self.dataset_sha()?,
            "train": self.cfg.train,
            "best_epoch": hist.best_epoch,
        });
        Checkpoint::new(&mlp, ds.norm, provenance).save(&self.out.join(SCRATCH_MODEL))?;
        write_file(self.out, TRAIN_CSV, |w| {
            writeln!(w, "epoch,train_mse,val_rpd_t,val_rpd_g,val_frac_g_within_50pct")?;
            for e in &hist.epochs {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    e.epoch, e.train_mse, e.val.rpd_t, e.val.rpd_g, e.val.frac_g_within_50pct
                )?;
            }
            Ok(())
        })?;
        write_json(
            self.out,
            TRAIN_SUMMARY,
            &json!({ "best_epoch": hist.best_epoch, "metric": hist.metric, "best": best }),
        )?;
        Ok(vec![SCRATCH_MODEL, TRAIN_CSV, TRAIN_SUMMARY])
    }

    fn finetune(&self) -> anyhow::Result<Vec<&'static str>> {
        let ds = self.load_dataset()?;
        let scratch = Checkpoint::load(&self.out.join(SCRATCH_MODEL))?;
        let (mlp, hist) = finetune(&scratch.mlp()?, &ds, &self.cfg.finetune)?;
        info!(
            "finetune: val RPD_G {:.4} -> {:.4}",
            hist.initial_val_rpd_g, hist.best_val_rpd_g
        );
        let provenance = json!({
            "stage": StageName::Finetune,
            "seed": self.cfg.seed,
            "dataset_meta_sha256": self.dataset_sha()?,
            "scratch_model_sha256": sha256_hex(&fs::read(self.out.join(SCRATCH_MODEL))?),
            "finetune": self.cfg.finetune,
            "best_stage": hist.best_stage,
        });
        Checkpoint::new(&mlp, ds.norm, provenance).save(&self.out.join(FINETUNED_MODEL))?;
        write_file(self.out, FINETUNE_CSV, |w| {
            writeln!(w, "stage,kernel,epoch,train_loss,val_rpd_g")?;
            for (i, s) in hist.stages.iter().enumerate() {
                for e in &s.epochs {
                    writeln!(w, "{i},{},{},{},{}", s.kernel, e.epoch, e.train_loss, e.val_rpd_g)?;
                }
            }
            Ok(())
        })?;
        let stages: Vec<Value> = hist
            .stages
            .iter()
            .map(|s| json!({ "kernel": s.kernel, "best_epoch": s.best_epoch, "best_val_rpd_g": s.best_val_rpd_g }))
            .collect();
        write_json(
            self.out,
            FINETUNE_SUMMARY,
            &json!({
                "initial_val_rpd_g": hist.initial_val_rpd_g,
                "best_stage": hist.best_stage,
                "best_val_rpd_g": hist.best_val_rpd_g,
                "stages": stages,
            }),
        )?;
        Ok(vec![FINETUNED_MODEL, FINETUNE_CSV, FINETUNE_SUMMARY])
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(FINETUNED_MODEL))
    }

    /// What the evaluated predictor is: the checkpoint bytes for `mlp`,
    /// otherwise its name and parameters.
    fn predictor_identity(&self) -> anyhow::Result<Value> {
        let e = &self.cfg.eval;
        if e.predictor == "mlp" {
            let path = self.checkpoint_path();
            let bytes = fs::read(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            Ok(json!({ "name": e.predictor, "sha256": sha256_hex(&bytes) }))
        } else {
            Ok(json!({
                "name": e.predictor,
                "device": self.cfg.device.params,
                "oracle": self.cfg.oracle,
                "fixed_pulse_ns": e.fixed_pulse_ns,
            }))
        }
    }

    fn build(&self, name: &str) -> anyhow::Result<Box<dyn PulsePredictor>> {
        let checkpoint = if name == "mlp" {
            let path = self.checkpoint_path();
            Some(Checkpoint::load(&path)?)
        } else {
            None
        };
        let ctx = PredictorContext {
            params: &self.cfg.device.params,
            oracle: &self.cfg.oracle,
            checkpoint: checkpoint.as_ref(),
            fixed_pulse_ns: self.cfg.eval.fixed_pulse_ns,
        };
        Ok(PredictorRegistry::new().build(name, &ctx)?)
    }

    fn summary(&self, extra: Value) -> anyhow::Result<Value> {
        let id = self.predictor_identity()?;
        let mut v = json!({
            "predictor": self.cfg.eval.predictor,
            "predictor_sha256": hash_json(&id)?,
            "seed": self.cfg.seed,
        });
        if let (Some(map), Value::Object(more)) = (v.as_object_mut(), extra) {
            map.extend(more);
        }
        Ok(v)
    }

    fn oneshot(&self) -> anyhow::Result<Vec<&'static str>> {
        let p = self.build(&self.cfg.eval.predictor)?;
        let oc = &self.cfg.eval.oneshot;
        let rep = one_shot_eval(p.as_ref(), &self.cfg.device.params, oc, self.cfg.seed)?;
        info!(
            "eval.oneshot: mean RPD {:.4}, {:.1}% of trials under 50%",
            rep.aggregate.mean_rpd,
            100.0 * rep.aggregate.frac_within_50pct
        );
        write_file(self.out, ONESHOT_TRIALS, |w| rep.write_trials_csv(w))?;
        write_file(self.out, ONESHOT_CELLS, |w| rep.write_cells_csv(w))?;
        let summary = self.summary(json!({
            "config": oc,
            "mean_rpd": rep.aggregate.mean_rpd,
            "frac_within_50pct": rep.aggregate.frac_within_50pct,
            "excluded": rep.aggregate.excluded,
            "trials": rep.trials.len(),
        }))?;
        write_json(self.out, ONESHOT_SUMMARY, &summary)?;
        Ok(vec![ONESHOT_TRIALS, ONESHOT_CELLS, ONESHOT_SUMMARY])
    }

    fn wav(&self) -> anyhow::Result<Vec<&'static str>> {
        let p = self.build(&self.cfg.eval.predictor)?;
        let run = &self.cfg.eval.wav;
        let traj = write_and_verify(
            p.as_ref(),
            &self.cfg.device.params,
            run.g_start,
            run.g_target,
            &run.config(),
            self.cfg.seed,
        )?;
        write_file(self.out, WAV_CSV, |w| {
            writeln!(w, "iteration,t_predicted_ns,g_after_uS")?;
            writeln!(w, "0,0,{}", traj.g_start)?;
            for r in &traj.records {
                writeln!(w, "{},{},{}", r.iteration, r.t_predicted, r.g_after)?;
            }
            Ok(())
        })?;
        let summary = self.summary(json!({
            "config": run,
            "converged_g": traj.converged_g,
            "iters_to_window": traj.iters_to_window,
            "pulse_ns_to_window": traj.pulse_ns_to_window,
        }))?;
        write_json(self.out, WAV_SUMMARY, &summary)?;
        Ok(vec![WAV_CSV, WAV_SUMMARY])
    }

    fn wav_sweep(&self) -> anyhow::Result<Vec<&'static str>> {
        let p = self.build(&self.cfg.eval.predictor)?;
        let sc = &self.cfg.eval.wav_sweep;
        let rep = wav_sweep(p.as_ref(), &self.cfg.device.params, sc, self.cfg.seed)?;
        write_file(self.out, SWEEP_CELLS, |w| rep.write_cells_csv(w))?;
        write_file(self.out, SWEEP_TRAJ, |w| rep.write_trajectories_csv(w))?;
        let summary = self.summary(json!({ "config": sc, "targets": rep.targets }))?;
        write_json(self.out, SWEEP_SUMMARY, &summary)?;
        Ok(vec![SWEEP_CELLS, SWEEP_TRAJ, SWEEP_SUMMARY])
    }

    fn delay(&self) -> anyhow::Result<Vec<&'static str>> {
        let p = self.build(&self.cfg.eval.predictor)?;
        let baseline = self.build("fixed-pulse")?;
        let dc = &self.cfg.eval.delay;
        let rep = delay_benchmark(p.as_ref(), baseline.as_ref(), &self.cfg.device.params, dc, self.cfg.seed)?;
        write_file(self.out, DELAY_CSV, |w| rep.write_csv(w))?;
        let summary = self.summary(json!({
            "config": dc,
            "baseline_pulse_ns": self.cfg.eval.fixed_pulse_ns,
            "rows": rep.rows,
        }))?;
        write_json(self.out, DELAY_SUMMARY, &summary)?;
        Ok(vec![DELAY_CSV, DELAY_SUMMARY])
    }
}
