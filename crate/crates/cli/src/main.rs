//! Command-line pipeline: synthesize logs, train the surrogate, predict
//! and evaluate battery power, compare spectra, and probe resolution
//! transfer. One TOML config drives everything; all outputs are CSV with
//! a header row. `EVPINO_THREADS` caps the worker pool.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use evpino_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use evpino_core::dataset::{load_log, make_windows, split_chronological, DriveLog, WindowSet};
use evpino_core::evaluation::{
    metrics, param_report, psd_compare, resolution_eval, stitch_predictions, write_psd_csv,
    write_rate_metrics_csv, StitchedTrace,
};
use evpino_core::operator::OperatorModel;
use evpino_core::synth::{gen_log, write_log_csv};
use evpino_core::training::{train_full, TrainData};

#[derive(Parser)]
#[command(name = "evpino", version, about = "EV parameter identification and power prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic drive log from known ground truth
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Two-stage training on a drive log; writes a checkpoint
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input drive-log CSV
        #[arg(long)]
        log: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch report CSV (default: `<out>.report.csv`)
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-sample predictions stitched from overlapping windows
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config supplying the log schema (defaults otherwise)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Error metrics and the learned-parameter table
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Metrics CSV; a `<stem>.params.csv` sibling holds the table
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Welch PSD of prediction vs truth with a peak-alignment verdict
    Psd {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Metrics at several sampling rates via band-limited resampling
    Resolution {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Comma-separated rates in Hz, e.g. 10,5,2
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    evpino_core::init_threads();
    match Cli::parse().cmd {
        Cmd::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Cmd::Train { config, log, out, report, seed } => {
            cmd_train(config.as_deref(), &log, &out, report.as_deref(), seed)
        }
        Cmd::Predict { checkpoint, log, out, config } => {
            cmd_predict(&checkpoint, &log, &out, config.as_deref())
        }
        Cmd::Eval { checkpoint, log, out, config } => {
            cmd_eval(&checkpoint, &log, out.as_deref(), config.as_deref())
        }
        Cmd::Psd { checkpoint, log, out, config } => {
            cmd_psd(&checkpoint, &log, &out, config.as_deref())
        }
        Cmd::Resolution { checkpoint, log, rates, out } => {
            cmd_resolution(&checkpoint, &log, &rates, out.as_deref())
        }
    }
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut synth = cfg.synth.clone();
    if let Some(s) = seed {
        synth.seed = s;
    }
    let log = gen_log(&synth)?;
    if log.v.iter().all(|v| (v - log.v[0]).abs() < 1e-12) {
        eprintln!("notice: degenerate cycle spec, constant speed profile");
    }
    write_log_csv(&log, out)?;
    println!(
        "wrote {} samples at {} Hz ({}s) to {}",
        log.len(),
        log.fs,
        log.len() as f64 / log.fs,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    log_path: &Path,
    out: &Path,
    report_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let log = load_log(log_path, &cfg.data.schema)?;
    let sg = cfg.sg.resolve(log.fs)?;

    let (train_log, val_log) =
        split_chronological(&log, cfg.data.frac_train, cfg.operator.l)?;
    let train = make_windows(&train_log, &sg, cfg.operator.l, cfg.data.stride, None)?;
    let val = make_windows(&val_log, &sg, cfg.operator.l, cfg.data.stride, Some(&train.scaler))?;
    println!(
        "log: {} samples at {} Hz -> {} train / {} val windows of {}",
        log.len(),
        log.fs,
        train.b,
        val.b,
        cfg.operator.l
    );

    let model = OperatorModel::new(cfg.operator, seed)?;
    let mut train_cfg = cfg.training;
    train_cfg.seed = seed;
    let data = TrainData { train, val };
    let report = train_full(&model, &data, &cfg.vehicle, &train_cfg)?;
    println!(
        "trained {} epochs (stage boundary {}), best val loss {:.6} kW² at epoch {}, stop: {:?}, {:.1}s",
        report.epochs.len(),
        report.stage_boundary,
        report.best_val_loss,
        report.best_epoch,
        report.stop,
        report.wall_time_s
    );

    let meta = CheckpointMeta {
        operator: cfg.operator,
        vehicle: cfg.vehicle.clone(),
        scaler: data.train.scaler,
        sg_span_s: cfg.sg.span_seconds(log.fs),
        sg_order: cfg.sg.order,
        stride: cfg.data.stride,
        fs: log.fs,
        best_val_loss: report.best_val_loss,
        epoch: report.best_epoch,
    };
    save_checkpoint(out, &model, &meta)?;
    let report_out = report_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("report.csv"));
    report.write_csv(&report_out)?;
    println!("checkpoint: {}", out.display());
    println!("report: {}", report_out.display());
    Ok(())
}

/// Rebuilds windows for an arbitrary log with a checkpoint's settings.
fn windows_for(log: &DriveLog, meta: &CheckpointMeta) -> Result<WindowSet> {
    let sg = evpino_core::signal::SgConfig::from_seconds(meta.sg_span_s, meta.sg_order, log.fs)?;
    Ok(make_windows(log, &sg, meta.operator.l, meta.stride, Some(&meta.scaler))?)
}

fn schema_from(config: Option<&Path>) -> Result<evpino_core::dataset::LogSchema> {
    Ok(RunConfig::load(config)?.data.schema)
}

fn stitched(
    checkpoint: &Path,
    log_path: &Path,
    config: Option<&Path>,
) -> Result<(OperatorModel, CheckpointMeta, DriveLog, StitchedTrace)> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let log = load_log(log_path, &schema_from(config)?)?;
    let windows = windows_for(&log, &meta)?;
    let trace = stitch_predictions(&model, &windows, &meta.vehicle, log.len())?;
    Ok((model, meta, log, trace))
}

fn cmd_predict(checkpoint: &Path, log_path: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let (_, _, log, trace) = stitched(checkpoint, log_path, config)?;
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?,
    );
    writeln!(f, "t,p_true,p_pred,p_res,eta_t,mu_t,paux_t")?;
    for (row, &i) in trace.index.iter().enumerate() {
        writeln!(
            f,
            "{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            log.t[i],
            log.p_bat[i],
            trace.p_pred[row],
            trace.p_res[row],
            trace.eta[row],
            trace.mu[row],
            trace.paux[row]
        )?;
    }
    println!("wrote {} prediction rows to {}", trace.index.len(), out.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    log_path: &Path,
    out: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let factory = RunConfig::load(config)?.factory;
    let (model, meta, log, trace) = stitched(checkpoint, log_path, config)?;
    let truth: Vec<f64> = trace.index.iter().map(|&i| log.p_bat[i]).collect();
    let m = metrics(&truth, &trace.p_pred)?;
    println!("MAE  {:.4} kW", m.mae);
    println!("RMSE {:.4} kW", m.rmse);
    if let (Some(rmae), Some(rrmse)) = (m.rmae, m.rrmse) {
        println!("rMAE {rmae:.4}   rRMSE {rrmse:.4}   (scale {:.4} kW)", m.scale.unwrap());
    }
    let windows = windows_for(&log, &meta)?;
    let report = param_report(&model, &meta.vehicle, &windows, factory.as_ref())?;
    println!("{}", report.to_table());
    if let Some(out) = out {
        let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
        writeln!(f, "mae_kw,rmse_kw,rmae,rrmse,scale_kw")?;
        writeln!(
            f,
            "{:.9},{:.9},{},{},{}",
            m.mae,
            m.rmse,
            m.rmae.map(|v| format!("{v:.9}")).unwrap_or_default(),
            m.rrmse.map(|v| format!("{v:.9}")).unwrap_or_default(),
            m.scale.map(|v| format!("{v:.9}")).unwrap_or_default(),
        )?;
        let params_out = out.with_extension("params.csv");
        report.write_csv(&params_out)?;
        println!("metrics: {}", out.display());
        println!("parameters: {}", params_out.display());
    }
    Ok(())
}

fn cmd_psd(checkpoint: &Path, log_path: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let (_, _, log, trace) = stitched(checkpoint, log_path, config)?;
    let truth: Vec<f64> = trace.index.iter().map(|&i| log.p_bat[i]).collect();
    let report = psd_compare(&truth, &trace.p_pred, log.fs)?;
    write_psd_csv(&report, out)?;
    println!(
        "peak alignment: {} (truth bins {:?}, prediction bins {:?})",
        if report.aligned { "aligned" } else { "NOT aligned" },
        report.peaks_true,
        report.peaks_pred
    );
    println!("psd: {}", out.display());
    Ok(())
}

fn cmd_resolution(
    checkpoint: &Path,
    log_path: &Path,
    rates: &[f64],
    out: Option<&Path>,
) -> Result<()> {
    if rates.is_empty() {
        anyhow::bail!("--rates needs at least one rate, e.g. --rates 10,5,2");
    }
    let (model, meta) = load_checkpoint(checkpoint)?;
    let log = load_log(log_path, &schema_from(None)?)?;
    let rows = resolution_eval(&model, &meta, &log, rates)?;
    println!("{:>8} {:>12} {:>12}  note", "rate_hz", "mae_kw", "rmse_kw");
    for r in &rows {
        match &r.report {
            Some(m) => println!("{:>8} {:>12.4} {:>12.4}", r.rate_hz, m.mae, m.rmse),
            None => println!(
                "{:>8} {:>12} {:>12}  {}",
                r.rate_hz,
                "-",
                "-",
                r.note.clone().unwrap_or_default()
            ),
        }
    }
    if let Some(out) = out {
        write_rate_metrics_csv(&rows, out)?;
        println!("table: {}", out.display());
    }
    Ok(())
}
