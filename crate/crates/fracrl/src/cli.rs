//! Command-line front end. Exit codes: 0 success, 1 domain failure,
//! 2 input/output or validation error, 3 bound violation.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fracrl_core::sysid::estimate_model_report;
use fracrl_core::theory::{run_suite_with, InstanceLimits, TheoryError, DEFAULT_NODE_CAP};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};
use crate::dataio::{analyze_memory, read_uci_file, DataError, MemoryReport, PatientSeries};
use crate::experiment::{run_experiment, write_text, ExperimentError};
use crate::formats::{model_to_json, read_dataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fracrl", version, about = "Fractional-order model learning and control")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a fractional model to a trajectory dataset.
    Fit {
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Model JSON to write; a `.report.json` file is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the model-based learning loop on a simulated patient.
    Mbrl {
        /// Experiment JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate glucose memory for every patient file in a directory.
    Uci {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the value-gap bound on random finite instances.
    Theory(TheoryArgs),
}

#[derive(Debug, Args)]
struct TheoryArgs {
    /// Number of instances.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_states: Option<usize>,
    #[arg(long)]
    max_actions: Option<usize>,
    #[arg(long)]
    max_horizon: Option<usize>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Fit { data, out } => fit(&data, &out),
        Command::Mbrl { config, out, seed } => mbrl(config.as_deref(), &out, seed),
        Command::Uci { input, out } => uci(&input, &out),
        Command::Theory(args) => theory(&args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err((code, msg)) => {
            log::error!("{msg}");
            eprintln!("error: {msg}");
            code
        }
    }
}

type CmdResult = Result<(), (i32, String)>;

fn invalid(e: impl ToString) -> (i32, String) {
    (EXIT_INVALID, e.to_string())
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    write_text(path, text).map_err(invalid)
}

#[derive(Serialize)]
struct FitReport {
    transitions: usize,
    dimensions: Vec<DimReport>,
}

#[derive(Serialize)]
struct DimReport {
    alpha: f64,
    hurst: f64,
    clamped: bool,
    residual_rms: f64,
}

fn report_path(out: &Path) -> PathBuf {
    out.with_extension("report.json")
}

fn fit(data: &Path, out: &Path) -> CmdResult {
    let file = File::open(data).map_err(|e| invalid(format!("{}: {e}", data.display())))?;
    let dataset = read_dataset(BufReader::new(file)).map_err(|e| invalid(format!("{}: {e}", data.display())))?;
    let est = estimate_model_report(&dataset).map_err(|e| (EXIT_FAILURE, format!("fit failed: {e}")))?;
    let report = FitReport {
        transitions: est.transitions,
        dimensions: est
            .hurst
            .iter()
            .zip(&est.residual_rms)
            .map(|(h, &rms)| DimReport {
                alpha: h.alpha,
                hurst: h.hurst,
                clamped: h.clamped,
                residual_rms: rms,
            })
            .collect(),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, &model_to_json(&est.model))?;
    let text = serde_json::to_string_pretty(&report).map_err(invalid)?;
    write_file(&report_path(out), &text)
}

fn mbrl(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            ConfigError::Io(io) => invalid(format!("{}: {io}", p.display())),
            other => invalid(format!("{}: {other}", p.display())),
        })?,
        None => ExperimentConfig::default().resolve().map_err(invalid)?,
    };
    let seed = seed.unwrap_or(cfg.seed);
    match run_experiment(&cfg, seed, out) {
        Ok(res) => {
            if let Some(last) = res.log.records.last() {
                println!(
                    "{} iterations, final time in range {:.1}%",
                    res.log.records.len(),
                    last.tir.within
                );
            }
            Ok(())
        }
        Err(e @ ExperimentError::Run { .. }) => Err((EXIT_FAILURE, e.to_string())),
        Err(e) => Err(invalid(e)),
    }
}

fn uci(input: &Path, out: &Path) -> CmdResult {
    let entries = std::fs::read_dir(input).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    create_dir(out)?;

    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["patient", "alpha", "hurst"]).map_err(invalid)?;
    let mut ok = 0;
    for path in &files {
        let patient = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let analyzed = read_uci_file(path).and_then(|parsed| {
            if parsed.skipped > 0 {
                log::warn!("{patient}: skipped {} malformed lines", parsed.skipped);
            }
            analyze_memory(&PatientSeries::from_records(patient.clone(), &parsed.records))
        });
        let fit = match analyzed {
            Ok(f) => f,
            Err(e @ (DataError::Unreadable { .. } | DataError::TooManyMalformed { .. })) => {
                log::error!("{patient}: {e}");
                continue;
            }
            Err(e) => {
                log::warn!("{patient}: {e}");
                continue;
            }
        };
        let report = MemoryReport::new(&patient, &fit);
        let text = serde_json::to_string_pretty(&report).map_err(invalid)?;
        write_file(&out.join(format!("{patient}.json")), &text)?;
        summary
            .write_record([patient.clone(), report.alpha.to_string(), report.hurst.to_string()])
            .map_err(invalid)?;
        ok += 1;
    }
    let bytes = summary.into_inner().map_err(invalid)?;
    write_file(&out.join("summary.csv"), &String::from_utf8_lossy(&bytes))?;
    log::info!("analyzed {ok} of {} files", files.len());
    if ok == 0 {
        return Err((EXIT_FAILURE, format!("no patient in {} could be analyzed", input.display())));
    }
    Ok(())
}

#[derive(Serialize)]
struct TheoryManifest {
    crate_version: &'static str,
    master_seed: u64,
    instances: usize,
    max_states: usize,
    max_actions: usize,
    max_horizon: usize,
}

fn theory(args: &TheoryArgs) -> CmdResult {
    let d = InstanceLimits::default();
    let limits = InstanceLimits {
        max_states: args.max_states.unwrap_or(d.max_states),
        max_actions: args.max_actions.unwrap_or(d.max_actions),
        max_horizon: args.max_horizon.unwrap_or(d.max_horizon),
    };
    limits.validate(DEFAULT_NODE_CAP).map_err(invalid)?;
    create_dir(&args.out)?;
    let manifest = TheoryManifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        master_seed: args.seed,
        instances: args.n,
        max_states: limits.max_states,
        max_actions: limits.max_actions,
        max_horizon: limits.max_horizon,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(invalid)?;
    write_file(&args.out.join("manifest.json"), &text)?;

    let reports = run_suite_with(args.seed, args.n, &limits).map_err(|e| match e {
        TheoryError::CapExceeded { .. } | TheoryError::Invalid(_) => invalid(e),
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "lhs", "rhs", "margin", "simulation_margin"])
        .map_err(invalid)?;
    for r in &reports {
        w.write_record([
            r.seed.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.margin().to_string(),
            r.simulation_margin.to_string(),
        ])
        .map_err(invalid)?;
    }
    let bytes = w.into_inner().map_err(invalid)?;
    write_file(&args.out.join("theory.csv"), &String::from_utf8_lossy(&bytes))?;

    let violations: Vec<u64> = reports
        .iter()
        .filter(|r| !r.gap_bound_holds() || !r.simulation_holds)
        .map(|r| r.seed)
        .collect();
    println!("{} instances, {} violations", reports.len(), violations.len());
    if !violations.is_empty() {
        for s in &violations {
            println!("violation at instance seed {s}");
        }
        return Err((EXIT_VIOLATION, format!("{} bound violations", violations.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_sits_beside_model() {
        assert_eq!(report_path(Path::new("out/m.json")), PathBuf::from("out/m.report.json"));
    }

    #[test]
    fn bad_arguments_are_invalid() {
        assert_eq!(run_cli(["fracrl", "fit"]), EXIT_INVALID);
        assert_eq!(run_cli(["fracrl", "nonsense"]), EXIT_INVALID);
    }
}
