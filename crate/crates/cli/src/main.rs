//! `batchsim` — experiment runner for the inference-serving simulator.
//!
//! Exit codes: 0 success, 1 internal error, 2 config validation error,
//! 3 missing file / IO error, 4 schema or parse error, 5 infeasible SLA,
//! 6 run aborted by the engine.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use batchsim_core::costmodel;
use batchsim_core::engine::EngineError;
use batchsim_core::experiment::{
    self, BuiltExperiment, ExperimentError, SweepAxis,
};
use batchsim_core::metrics::MetricsError;

#[derive(Parser)]
#[command(
    name = "batchsim",
    version,
    about = "Discrete-event simulator for continuous-batching LLM inference serving"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its summary JSON.
    Simulate {
        config: PathBuf,
        /// Also write the per-step event log to this CSV path.
        #[arg(long)]
        emit_steps: Option<PathBuf>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one simulation per axis value and emit a CSV table.
    Sweep {
        config: PathBuf,
        /// Axis to vary: batch_size, qps, or d_sla.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Bisect the largest sustainable arrival rate under the SLA.
    Capacity {
        config: PathBuf,
        #[arg(long)]
        lo: f64,
        #[arg(long)]
        hi: f64,
        #[arg(long)]
        tol: f64,
    },
    /// Fit the decode-step latency model from a measurement CSV.
    Calibrate { csv: PathBuf },
}

fn exit_code_for(err: &ExperimentError) -> u8 {
    match err {
        ExperimentError::Validation(_) => 2,
        ExperimentError::Io { .. } => 3,
        ExperimentError::Schema { .. } => 4,
        ExperimentError::Workload(w) => match w {
            batchsim_core::workload::WorkloadError::TraceIo { .. } => 3,
            batchsim_core::workload::WorkloadError::TraceParse { .. } => 4,
            _ => 2,
        },
        ExperimentError::CostModel(c) => match c {
            costmodel::CostModelError::CalibrationIo { .. } => 3,
            costmodel::CostModelError::CalibrationParse { .. } => 4,
            _ => 2,
        },
        ExperimentError::Memory(_) | ExperimentError::Policy(_) => 2,
        ExperimentError::Engine(e) => match e {
            EngineError::QueueOverflow { .. }
            | EngineError::RequestExceedsCapacity { .. }
            | EngineError::Stalled { .. } => 6,
            _ => 1,
        },
        ExperimentError::Metrics(m) => match m {
            MetricsError::InfeasibleSla { .. } => 5,
            MetricsError::InvalidTolerance(_) | MetricsError::InvalidBounds { .. } => 2,
            _ => 1,
        },
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load(config: &Path) -> Result<BuiltExperiment, ExperimentError> {
    experiment::load_and_build(config)
}

fn cmd_simulate(
    config: &Path,
    emit_steps: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), ExperimentError> {
    let built = load(config)?;
    let specs = built.config.policy.as_slice().to_vec();
    let mut summaries = Vec::with_capacity(specs.len());
    let mut label_counts = std::collections::HashMap::new();
    for (i, spec) in specs.iter().enumerate() {
        let (result, summary) = built.simulate(spec, seed, None)?;
        let n = label_counts
            .entry(spec.label())
            .and_modify(|c| *c += 1)
            .or_insert(1usize);
        let label = if *n > 1 {
            format!("{}#{n}", spec.label())
        } else {
            spec.label().to_string()
        };
        println!(
            "policy={label} throughput={:.1} tok/s tbt_mean={:.2} ms tbt_p99={:.2} ms \
             overflow_rate={:.4} preemptions={}",
            summary.throughput_tps,
            summary.tbt_mean_ms,
            summary.tbt_p99_ms,
            summary.overflow_rate,
            result.totals.preemptions
        );
        if i == 0 {
            if let Some(path) = emit_steps {
                write_file(path, &experiment::steps_to_csv(&result.step_records))?;
            }
        }
        summaries.push((label, summary));
    }
    let json = experiment::summaries_to_json(&summaries);
    if let Some(path) = &built.config.output.summary_json {
        write_file(Path::new(path), &json)?;
    } else {
        println!("{json}");
    }
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    axis: &str,
    values: &[f64],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), ExperimentError> {
    let axis: SweepAxis = axis
        .parse()
        .map_err(ExperimentError::Validation)?;
    let built = load(config)?;
    let rows = experiment::sweep(&built, axis, values, seed)?;
    let csv = experiment::sweep_rows_to_csv(&rows);
    match out {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_capacity(config: &Path, lo: f64, hi: f64, tol: f64) -> Result<(), ExperimentError> {
    let built = load(config)?;
    let report = experiment::capacity_report(&built, lo, hi, tol)?;
    for c in &report.capacities {
        println!("policy={} capacity={:.2} qps", c.policy, c.capacity_qps);
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    Ok(())
}

fn cmd_calibrate(csv: &Path) -> Result<(), ExperimentError> {
    let samples = costmodel::load_calibration(csv)?;
    let (a0, a1) = costmodel::fit_step_latency(&samples)?;
    println!(
        "{}",
        serde_json::json!({
            "decode_base_ms": a0,
            "decode_per_seq_ms": a1,
            "samples": samples.len(),
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate {
            config,
            emit_steps,
            seed,
        } => cmd_simulate(config, emit_steps.as_deref(), *seed),
        Command::Sweep {
            config,
            axis,
            values,
            out,
            seed,
        } => cmd_sweep(config, axis, values, out.as_deref(), *seed),
        Command::Capacity { config, lo, hi, tol } => cmd_capacity(config, *lo, *hi, *tol),
        Command::Calibrate { csv } => cmd_calibrate(csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
