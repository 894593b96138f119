//! Command-line entry point: train, evaluate, analyse lags, benchmark,
//! generate synthetic data and sweep patch geometry.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use sha2::{Digest, Sha256};

use sensorformer::bench::{scaling_sweep, BenchMode, SweepConfig};
use sensorformer::data::{dataset_name, load_csv, synth_lagged, write_synthetic, LagSpec, MultivariateSeries, SplitSpec};
use sensorformer::laglab::lag_report;
use sensorformer::model::{build_model, Model};
use sensorformer::training::{
    evaluate, evaluate_scaled, history_csv, metrics_json, multi_seed_csv, multi_seed_run, prepare_data, train_with,
    write_predictions, EvalMetrics, PreparedData,
};
use sensorformer::Exec;

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "sensorformer", version, about = "Two-stage cross-patch attention forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file; flags override it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a CSV and write checkpoint, history and test metrics
    Train(Common),
    /// Evaluate a checkpoint on one split
    Eval(Common),
    /// Patch-lag statistics of sampled lookback windows
    Lag(Common),
    /// Time attention blocks over a grid of patch counts
    Bench(Common),
    /// Generate a synthetic lagged dataset with a metadata sidecar
    Synth(Common),
    /// Train one model per cell of the patch length, stride and width grids
    Sweep(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Lag(c) => ("lag", c),
        Command::Bench(c) => ("bench", c),
        Command::Synth(c) => ("synth", c),
        Command::Sweep(c) => ("sweep", c),
    };
    let cfg = match RunConfig::load(common.config.as_deref(), &common.overrides) {
        Ok(c) => c,
        Err(e) => return usage_error(name, &format!("{e:#}")),
    };
    if matches!(name, "train" | "lag" | "sweep" | "eval") && cfg.data.is_none() {
        return usage_error(name, "a dataset path is required (--data FILE or data= in the config file)");
    }
    if name == "eval" && cfg.checkpoint.is_none() {
        return usage_error(name, "a checkpoint is required (--checkpoint FILE)");
    }
    let result = match name {
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "lag" => cmd_lag(&cfg),
        "bench" => cmd_bench(&cfg),
        "synth" => cmd_synth(&cfg),
        _ => cmd_sweep(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn usage_error(sub: &str, msg: &str) -> ExitCode {
    let mut cmd = Cli::command();
    cmd.build();
    let usage = cmd
        .find_subcommand_mut(sub)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    eprintln!("error: {msg}\n\n{usage}\n\nFor more information, try 'sensorformer {sub} --help'.");
    ExitCode::from(2)
}

fn exec(cfg: &RunConfig) -> Exec {
    if cfg.parallel {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

/// `<out>/<first 12 hex of sha256(command + config)>-s<seed>`, created.
fn run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let mut keyed = cfg.clone();
    keyed.out = None;
    let digest = Sha256::digest(format!("command={command}\n{}", keyed.to_kv()).as_bytes());
    let hash: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    let dir = cfg.out_root().join(format!("{hash}-s{}", cfg.seed));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write(&dir.join("config.txt"), &format!("# created unix={stamp}\n# command={command}\n{}", cfg.to_kv()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> Result<MultivariateSeries> {
    let path = cfg.data.as_deref().context("no dataset path")?;
    load_csv(path).with_context(|| format!("loading {}", path.display()))
}

fn split_for(cfg: &RunConfig, rows: usize) -> Result<SplitSpec> {
    let name = if cfg.dataset.is_empty() {
        cfg.data.as_deref().and_then(dataset_name)
    } else {
        Some(cfg.dataset.clone())
    };
    Ok(SplitSpec::for_dataset(name.as_deref(), rows, cfg.lookback)?)
}

fn prepared(cfg: &RunConfig, series: &MultivariateSeries) -> Result<PreparedData> {
    let split = split_for(cfg, series.len())?;
    Ok(prepare_data(series, &split, cfg.lookback, cfg.horizon, cfg.train_stride)?)
}

fn metrics_on(cfg: &RunConfig, model: &Model, data: &PreparedData, windows: &[sensorformer::data::WindowSample]) -> Result<EvalMetrics> {
    Ok(if cfg.raw_metrics {
        evaluate_scaled(model, windows, exec(cfg), &data.scaler.std)?
    } else {
        evaluate(model, windows, exec(cfg))?
    })
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let series = load_data(cfg)?;
    let data = prepared(cfg, &series)?;
    let dir = run_dir(cfg, "train")?;
    eprintln!(
        "{} rows × {} variables; windows train {} val {} test {}; run {}",
        series.len(),
        series.n_vars(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        dir.display()
    );
    let mut model = build_model(&cfg.model())?;
    let tcfg = cfg.train();
    let history = train_with(&mut model, &data.train, &data.val, &tcfg, exec(cfg), |r| {
        if tcfg.report_every > 0 && r.epoch % tcfg.report_every == 0 {
            eprintln!("epoch {:>3}  train {:.6}  val mse {:.6}  val mae {:.6}", r.epoch, r.train_loss, r.val_mse, r.val_mae);
        }
    })?;
    let test = metrics_on(cfg, &model, &data, &data.test)?;
    model.save(&dir.join("checkpoint.txt"))?;
    write(&dir.join("history.csv"), &history_csv(&history))?;
    let line = metrics_json(&test)?;
    write(&dir.join("metrics.json"), &format!("{line}\n"))?;
    write_predictions(&dir.join("predictions.csv"), &model, &data.test, cfg.prediction_windows, exec(cfg))?;
    if !cfg.seeds.is_empty() {
        let summary = multi_seed_run(&cfg.model(), &tcfg, &data, &cfg.seeds, exec(cfg))?;
        write(&dir.join("multi_seed.csv"), &multi_seed_csv(&summary))?;
        eprintln!(
            "seeds {:?}: mse {:.6} ± {:.6}, mae {:.6} ± {:.6}",
            cfg.seeds, summary.mse_mean, summary.mse_std, summary.mae_mean, summary.mae_std
        );
    }
    println!("{line}");
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let path = cfg.checkpoint.as_deref().context("no checkpoint")?;
    let model = Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mc = &model.config;
    if mc.horizon != cfg.horizon {
        bail!("horizon mismatch: checkpoint predicts {} steps, config asks for {}", mc.horizon, cfg.horizon);
    }
    if mc.patch.lookback != cfg.lookback {
        bail!("lookback mismatch: checkpoint uses {}, config asks for {}", mc.patch.lookback, cfg.lookback);
    }
    let series = load_data(cfg)?;
    let data = prepared(cfg, &series)?;
    let windows = match cfg.split.as_str() {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => bail!("unknown split '{other}', expected train, val or test"),
    };
    println!("{}", metrics_json(&metrics_on(cfg, &model, &data, windows)?)?);
    Ok(())
}

fn cmd_lag(cfg: &RunConfig) -> Result<()> {
    let series = load_data(cfg)?;
    let report = lag_report(&series, &cfg.patch(), cfg.n_tensors, cfg.seed, exec(cfg))?;
    let dir = run_dir(cfg, "lag")?;
    write(&dir.join("lag.csv"), &report.to_csv())?;
    println!(
        "mean proportion {:.4}  mean distance {:.4}  ({} tensors, {})",
        report.mean_proportion,
        report.mean_distance,
        report.tensors.len(),
        dir.join("lag.csv").display()
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let sweep = scaling_sweep(&SweepConfig {
        variants: cfg.bench_variants.clone(),
        n_grid: cfg.bench_patches.clone(),
        n_vars: cfg.bench_vars,
        d_model: cfg.bench_d_model,
        heads: cfg.heads,
        reps: cfg.bench_reps,
        mode: if cfg.bench_backward {
            BenchMode::ForwardBackward
        } else {
            BenchMode::Forward
        },
        budget_bytes: Some(cfg.bench_budget_mb << 20),
    })?;
    let dir = run_dir(cfg, "bench")?;
    write(&dir.join("bench.csv"), &sweep.to_csv())?;
    write(&dir.join("slopes.csv"), &sweep.slopes_csv())?;
    print!("{}", sweep.to_csv());
    for s in &sweep.skipped {
        eprintln!("skipped {} N={}: {}", s.variant, s.n_patches, s.reason);
    }
    for (v, k) in &sweep.slopes {
        eprintln!("{v}: log-log slope {k:.3}");
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let spec = LagSpec::parse_edges(&cfg.synth_edges, cfg.synth_noise)?;
    let (series, meta) = synth_lagged(cfg.synth_vars, cfg.synth_rows, &spec, cfg.seed)?;
    let dir = run_dir(cfg, "synth")?;
    let (csv, meta_path) = write_synthetic(&series, &meta, &dir.join("synthetic.csv"))?;
    println!("{}\n{}", csv.display(), meta_path.display());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let series = load_data(cfg)?;
    let dir = run_dir(cfg, "sweep")?;
    let mut csv = String::from("axis,patch_len,stride,d_model,mse,mae\n");
    for axis in &cfg.sweep_axes {
        let values = match axis.as_str() {
            "patch_len" => &cfg.sweep_patch_len,
            "stride" => &cfg.sweep_stride,
            "d_model" => &cfg.sweep_d_model,
            other => bail!("unknown sweep axis '{other}'"),
        };
        for &v in values {
            let mut cell = cfg.clone();
            cell.set(axis, &v.to_string())?;
            let data = prepared(&cell, &series)?;
            let mut model = build_model(&cell.model())?;
            train_with(&mut model, &data.train, &data.val, &cell.train(), exec(cfg), |_| {})?;
            let m = metrics_on(&cell, &model, &data, &data.test)?;
            eprintln!("{axis}={v}: mse {:.6} mae {:.6}", m.mse, m.mae);
            let _ = writeln!(csv, "{axis},{},{},{},{},{}", cell.patch_len, cell.stride, cell.d_model, m.mse, m.mae);
        }
    }
    write(&dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
