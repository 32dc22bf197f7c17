use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedsca_core::oracle::run_suite;
use fedsca_core::orchestrator::{run_sweep, ExportFormat, SweepAxis};
use fedsca_core::{run_experiment, Error, ExperimentConfig, ResultsStore};

/// Federated adapter tuning with similarity-guided aggregation.
#[derive(Debug, Parser)]
#[command(name = "fedsca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and store its results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// overrides the experiment and data seeds
        #[arg(long)]
        seed: Option<u64>,
        /// defaults to `experiment.output_dir`, then `runs/seed<S>`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the experiment once per value of one axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// L, beta, alpha, metric or aggregator
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// each run lands in `<out>/<axis>=<value>`
        #[arg(long, default_value = "sweeps")]
        out: PathBuf,
    },
    /// Check the solvers and gradients against brute-force references.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write flat tables from a stored run.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// defaults to `<run>/export`
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ExportFormat::Csv,
            Format::Jsonl => ExportFormat::Jsonl,
        }
    }
}

fn print_summary(label: &str, store: &ResultsStore, dir: &Path) {
    let s = &store.summary;
    println!(
        "{label}: rounds={} iou={:.4} dice={:.4} train_loss={:.4} comm={} -> {}",
        s.rounds,
        s.final_mean_iou,
        s.final_mean_dice,
        s.final_mean_train_loss,
        s.comm_total,
        dir.display()
    );
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let dir = out
        .or_else(|| cfg.experiment.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", cfg.experiment.seed)));
    let store = run_experiment(&cfg)?;
    store.save(&dir, &cfg)?;
    print_summary("run", &store, &dir);
    Ok(())
}

fn sweep(config: &Path, axis: &str, values: &[String], out: &Path) -> Result<(), Error> {
    let base = ExperimentConfig::from_file(config)?;
    let axis: SweepAxis = axis.parse()?;
    let mut first_failure = None;
    for (value, point) in values.iter().zip(run_sweep(&base, axis, values)?) {
        let dir = out.join(&point.label);
        let saved = point
            .outcome
            .and_then(|store| axis.apply(&base, value).and_then(|cfg| store.save(&dir, &cfg)).map(|_| store));
        match saved {
            Ok(store) => print_summary(&point.label, &store, &dir),
            Err(e) => {
                println!("{}: FAILED {e}", point.label);
                first_failure.get_or_insert(e);
            }
        }
    }
    first_failure.map_or(Ok(()), Err)
}

fn oracle_check(seed: u64) -> Result<(), Error> {
    let checks = run_suite(seed)?;
    for c in &checks {
        println!(
            "[{}] {}: worst {:.3e} (tol {:.0e}, {} cases)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst_error,
            c.tolerance,
            c.cases
        );
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(Error::Numeric(format!("{n} oracle check(s) failed"))),
    }
}

fn export(run: &Path, format: Format, out: Option<PathBuf>) -> Result<(), Error> {
    let store = ResultsStore::load(run)?;
    let dir = out.unwrap_or_else(|| run.join("export"));
    for path in store.export(&dir, format.into())? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => sweep(&config, &axis, &values, &out),
        Command::OracleCheck { seed } => oracle_check(seed),
        Command::Export { run, format, out } => export(&run, format, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
