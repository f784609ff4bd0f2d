//! `mapo-lab`: pretrain a base model, synthesize preference data, align with MaPO,
//! Diffusion-DPO or SFT, evaluate, and run sweeps.

mod config;
mod error;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mapo_lab::diffusion::{DenoiserParams, OutputInit};
use mapo_lab::experiment::{
    base_task, preference_data, pretrain_base, read_results, run_sweep, write_results, Report,
};
use mapo_lab::metrics::{evaluate, oracle_test_mse, test_mse, Baseline, EvalConfig};
use mapo_lab::objectives::ObjectiveKind;
use mapo_lab::parallel::{derive_seed, thread_cap};
use mapo_lab::tasks::{load_dataset, oracle_reward, save_dataset, save_dataset_json, Preset, Which};
use mapo_lab::train::{load_checkpoint, save_checkpoint, write_step_logs, Trainer, TrainError};

use config::{parse_override, Resolved};
use error::CliError;
use manifest::RunManifest;

const ALIGN_INIT_STREAM: u64 = 21;
const TEST_MSE_SAMPLES: usize = 16384;

#[derive(Parser)]
#[command(name = "mapo-lab", version, about = "Margin-aware preference optimization on small diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config. Built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Shortcut for `--set task.preset=<name>`.
    #[arg(long)]
    task: Option<Preset>,
    /// Print the resolved config and exit without writing anything.
    #[arg(long)]
    dry_run: bool,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model with SFT on the unshifted base mixture.
    Pretrain(Common),
    /// Synthesize a preference dataset for the configured task.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Base model checkpoint whose generations become the rejected samples.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write a JSON copy of the dataset.
        #[arg(long)]
        json: bool,
    },
    /// Fine-tune on a preference dataset.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        objective: Option<ObjectiveKind>,
        /// Temperature of the chosen objective (β for MaPO, β_dpo for DPO).
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        dataset: PathBuf,
        /// Starting checkpoint. DPO also freezes it as its reference.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint on the configured task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model to compute win rates against. Defaults to the anchor stored in the checkpoint.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Generations per condition.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the cartesian sweep described by the config.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Cells trained concurrently. Defaults to the MAPO_LAB_THREADS cap or 1.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Summarize a results table and redraw its plots.
    Report {
        results: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
}

impl Common {
    fn resolve(&self, extra: Vec<(String, Value)>) -> Result<Resolved, CliError> {
        let mut overrides = Vec::new();
        if let Some(p) = self.task {
            overrides.push(("task.preset".to_string(), json!(p)));
            overrides.push(("task.mismatch_level".to_string(), Value::Null));
        }
        for raw in &self.overrides {
            overrides.push(parse_override(raw)?);
        }
        overrides.extend(extra);
        Resolved::load(self.config.as_deref(), &overrides)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("--out is required".into()))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_logs(path: &Path, logs: &[mapo_lab::train::StepLog]) -> Result<(), CliError> {
    let file = fs::File::create(path)?;
    write_step_logs(file, logs).map_err(|e| CliError::Io(e.to_string()))
}

fn cmd_pretrain(common: &Common) -> Result<(), CliError> {
    let resolved = common.resolve(Vec::new())?;
    if common.dry_run {
        println!("{}", resolved.pretty());
        return Ok(());
    }
    let cfg = &resolved.config;
    let out = common.out_dir()?;
    let seed = cfg.train.seed;
    let mut manifest = RunManifest::start("pretrain", resolved.value.clone(), vec![seed]);
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    let schedule = cfg.model.schedule()?;
    let outcome = pretrain_base(cfg, &schedule, seed)?;
    create_dir(out)?;
    save_checkpoint(&out.join("base.ckpt"), &outcome.checkpoint)?;
    write_logs(&out.join("steps.csv"), &outcome.logs)?;
    let task = base_task();
    let mse = test_mse(
        &outcome.checkpoint.params,
        &schedule,
        &task,
        Which::Base,
        TEST_MSE_SAMPLES,
        derive_seed(seed, &[1]),
    )?;
    let oracle = oracle_test_mse(&task, Which::Base, &schedule)?;
    println!("test mse {mse:.5} (analytic optimum {oracle:.5}, ratio {:.4})", mse / oracle);
    manifest.summary = json!({"test_mse": mse, "oracle_test_mse": oracle});
    manifest.finish(out)?;
    Ok(())
}

fn cmd_gen_data(common: &Common, init: Option<&Path>, json_copy: bool) -> Result<(), CliError> {
    let resolved = common.resolve(Vec::new())?;
    let cfg = &resolved.config;
    let base = match init {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    if base.is_none() && cfg.data.rejected == mapo_lab::experiment::RejectedFrom::Model {
        return Err(CliError::Config(
            "data.rejected = model needs --init with a base checkpoint".into(),
        ));
    }
    if common.dry_run {
        println!("{}", resolved.pretty());
        return Ok(());
    }
    let out = common.out_dir()?;
    let seed = cfg.train.seed;
    let mut manifest = RunManifest::start("gen-data", resolved.value.clone(), vec![seed]);
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    if let Some(p) = init {
        manifest.input(p)?;
    }
    let task = cfg.task.resolve()?;
    let schedule = cfg.model.schedule()?;
    let data = preference_data(
        cfg,
        &task,
        base.as_ref().map(|b| &b.params),
        &schedule,
        cfg.data.size,
        seed,
    )?;
    let mut valid = 0usize;
    for r in &data.records {
        if oracle_reward(&task, &r.x_w, &r.c)? > oracle_reward(&task, &r.x_l, &r.c)? {
            valid += 1;
        }
    }
    let valid_fraction = valid as f64 / data.len() as f64;
    create_dir(out)?;
    save_dataset(&out.join("dataset.bin"), &data)?;
    if json_copy {
        save_dataset_json(&out.join("dataset.json"), &data)?;
    }
    println!(
        "{} pairs for task {} (mismatch {}), {:.1}% prefer the chosen sample",
        data.len(),
        task.name,
        task.mismatch_level,
        100.0 * valid_fraction
    );
    manifest.summary = json!({"pairs": data.len(), "valid_fraction": valid_fraction});
    manifest.finish(out)?;
    Ok(())
}

fn cmd_align(
    common: &Common,
    objective: Option<ObjectiveKind>,
    beta: Option<f64>,
    dataset: &Path,
    init: Option<&Path>,
) -> Result<(), CliError> {
    let mut extra = Vec::new();
    if let Some(k) = objective {
        extra.push(("train.objective.kind".to_string(), json!(k)));
    }
    let preliminary = common.resolve(extra.clone())?;
    let kind = preliminary.config.train.objective.kind;
    if let Some(b) = beta {
        let field = if kind == ObjectiveKind::Dpo { "beta_dpo" } else { "beta" };
        extra.push((format!("train.objective.{field}"), json!(b)));
    }
    let resolved = common.resolve(extra)?;
    let cfg = &resolved.config;
    match (kind, init) {
        (ObjectiveKind::Dpo, None) => {
            return Err(CliError::Config(
                "objective dpo needs a reference model: pass --init <checkpoint>".into(),
            ))
        }
        (ObjectiveKind::Mapo | ObjectiveKind::Sft, Some(_)) => eprintln!(
            "warning: {kind} is reference-free; --init only provides the starting weights and is not used as a reference"
        ),
        _ => {}
    }
    if common.dry_run {
        println!("{}", resolved.pretty());
        return Ok(());
    }
    let out = common.out_dir()?;
    let mut manifest = RunManifest::start("align", resolved.value.clone(), vec![cfg.train.seed]);
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    manifest.input(dataset)?;
    let data = load_dataset(dataset)?;
    let task = cfg.task.resolve()?;
    let schedule = cfg.model.schedule()?;
    let params = match init {
        Some(p) => {
            manifest.input(p)?;
            load_checkpoint(p)?.params
        }
        None => DenoiserParams::init(
            cfg.model.architecture(&task),
            derive_seed(cfg.train.seed, &[ALIGN_INIT_STREAM]),
            OutputInit::Zero,
        ),
    };
    create_dir(out)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_path = Some(out.join("checkpoint.ckpt"));
    let trainer = Trainer::new(tc, &schedule, &data, &task, params)?;
    match trainer.run() {
        Ok(outcome) => {
            write_logs(&out.join("steps.csv"), &outcome.logs)?;
            if let Some(last) = outcome.logs.last() {
                println!(
                    "{kind}: {} steps, final loss {:.6}, mse_w {:.5}, mse_l {:.5}",
                    outcome.checkpoint.step, last.total, last.mse_w, last.mse_l
                );
            }
            manifest.summary = json!({"steps": outcome.checkpoint.step});
            manifest.finish(out)?;
            Ok(())
        }
        Err(TrainError::NonFinite { step, last_good }) => {
            save_checkpoint(&out.join("last_good.ckpt"), &last_good)?;
            manifest.summary = json!({"aborted_at_step": step, "last_good_step": last_good.step});
            manifest.finish(out)?;
            Err(CliError::Runtime(format!(
                "non-finite loss at step {step}; last good checkpoint (step {}) saved",
                last_good.step
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    baseline: Option<&Path>,
    n: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut extra = Vec::new();
    if let Some(n) = n {
        extra.push(("eval.samples".to_string(), json!(n)));
    }
    if let Some(s) = seed {
        extra.push(("eval.seed".to_string(), json!(s)));
    }
    let resolved = common.resolve(extra)?;
    if common.dry_run {
        println!("{}", resolved.pretty());
        return Ok(());
    }
    let cfg = &resolved.config;
    let out = common.out_dir()?;
    let mut manifest = RunManifest::start("eval", resolved.value.clone(), vec![cfg.eval.seed]);
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    manifest.input(checkpoint)?;
    let ck = load_checkpoint(checkpoint)?;
    let reference = match baseline {
        Some(p) => {
            manifest.input(p)?;
            Some(load_checkpoint(p)?.params)
        }
        None => ck.anchor.clone(),
    };
    let base = match &reference {
        Some(params) => Baseline::Model(params),
        None => Baseline::BaseMixture,
    };
    let task = cfg.task.resolve()?;
    let schedule = cfg.model.schedule()?;
    let mut eval = EvalConfig::new(cfg.eval.samples, cfg.eval.seed);
    eval.record_timing = cfg.train.record_timing;
    let report = evaluate(&ck.params, &schedule, &task, &base, eval)?;
    create_dir(out)?;
    report.write_csv(fs::File::create(out.join("metrics.csv"))?)?;
    fs::write(out.join("metrics.json"), report.to_json()? + "\n")?;
    println!("{}\n{}", mapo_lab::metrics::MetricsReport::csv_header(), report.to_csv_row());
    manifest.summary = serde_json::to_value(&report).expect("report serializes");
    manifest.finish(out)?;
    Ok(())
}

fn cmd_sweep(common: &Common, jobs: Option<usize>) -> Result<(), CliError> {
    let resolved = common.resolve(Vec::new())?;
    let cfg = &resolved.config;
    let cells = mapo_lab::experiment::expand_cells(cfg);
    if common.dry_run {
        println!("{}", resolved.pretty());
        eprintln!("{} cells", cells.len());
        return Ok(());
    }
    let out = common.out_dir()?;
    let jobs = jobs.or(thread_cap()).unwrap_or(1);
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut manifest = RunManifest::start("sweep", resolved.value.clone(), seeds);
    if let Some(p) = &common.config {
        manifest.input(p)?;
    }
    eprintln!("running {} cells with {jobs} jobs", cells.len());
    let rows = run_sweep(cfg, jobs, Some(&out.join("cells")))?;
    create_dir(out)?;
    write_results(fs::File::create(out.join("results.csv"))?, &rows)?;
    let report = Report::from_rows(&rows);
    report.write(out)?;
    print!("{}", report.table());
    let failed = rows.iter().filter(|r| !r.status.is_ok()).count();
    manifest.summary = json!({"cells": rows.len(), "failed": failed});
    manifest.finish(out)?;
    if failed > 0 {
        eprintln!("warning: {failed} cells did not finish; see the status column");
    }
    Ok(())
}

fn cmd_report(results: &Path, out: Option<&Path>, dry_run: bool) -> Result<(), CliError> {
    let rows = read_results(fs::File::open(results)?)?;
    let report = Report::from_rows(&rows);
    if dry_run {
        print!("{}", report.table());
        return Ok(());
    }
    let out = out.ok_or_else(|| CliError::Config("--out is required".into()))?;
    let mut manifest = RunManifest::start("report", json!({"results": results}), Vec::new());
    manifest.input(results)?;
    report.write(out)?;
    print!("{}", report.table());
    manifest.finish(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Pretrain(common) => cmd_pretrain(common),
        Command::GenData { common, init, json } => cmd_gen_data(common, init.as_deref(), *json),
        Command::Align {
            common,
            objective,
            beta,
            dataset,
            init,
        } => cmd_align(common, *objective, *beta, dataset, init.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            baseline,
            n,
            seed,
        } => cmd_eval(common, checkpoint, baseline.as_deref(), *n, *seed),
        Command::Sweep { common, jobs } => cmd_sweep(common, *jobs),
        Command::Report {
            results,
            out,
            dry_run,
        } => cmd_report(results, out.as_deref(), *dry_run),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
