use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roughhom::experiment::{emit_report, run_experiment, write_report, ExperimentConfig, ExperimentId, ReportFormat};

/// Thread count for replica-parallel runs.
const THREADS_ENV: &str = "ROUGHHOM_THREADS";

#[derive(Parser)]
#[command(name = "roughhom", version, about = "Convergence experiments for rough homogenization of slow-fast systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Level-1 or level-2 distance between the fast lift and its limit over an ε-ladder
    LiftConvergence(RunArgs),
    /// Antisymmetric correction and Lyapunov algebra for one (C, Q)
    CorrectionM(RunArgs),
    /// Variance decay of ergodic averages of the fast process
    ErgodicRate(RunArgs),
    /// Itô-Stokes drift estimates against the Gaussian oracle
    ItoStokes(RunArgs),
    /// Slow-fast fluid against the rough limit equation
    SlowfastLimit(RunArgs),
    /// Sobolev operator norms of the rough drivers
    DriverBounds(RunArgs),
    /// Print the built-in config of an experiment as JSON
    ExampleConfig { experiment: String },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; the built-in example is used when absent
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `<stem>.json` and `<stem>.csv`; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config replica count
    #[arg(long)]
    replicas: Option<usize>,
    /// Format written to stdout when no output directory is set
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be positive"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(id: ExperimentId, args: RunArgs) -> Result<bool, String> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ExperimentConfig::example(id),
    };
    if cfg.experiment != id {
        return Err(format!("config describes `{}`, not `{id}`", cfg.experiment));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replicas {
        cfg.replicas = r;
    }
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let dir = args.out.or_else(|| cfg.output.dir.clone());
    match dir {
        Some(dir) => {
            let stem = cfg.output.stem.clone().unwrap_or_else(|| id.to_string());
            let (json, csv) = write_report(&report, &dir, &stem).map_err(|e| e.to_string())?;
            eprintln!("wrote {} and {}", json.display(), csv.display());
        }
        None => {
            let fmt = match args.format {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
            };
            print!("{}", emit_report(&report, fmt).map_err(|e| e.to_string())?);
        }
    }
    for t in &report.targets {
        eprintln!(
            "{} {}: measured {} against {} ± {}",
            if t.pass { "PASS" } else { "FAIL" },
            t.target.metric,
            t.measured,
            t.target.value,
            t.target.tolerance
        );
    }
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let (id, args) = match cli.command {
        Command::LiftConvergence(a) => (ExperimentId::LiftConvergence, a),
        Command::CorrectionM(a) => (ExperimentId::CorrectionM, a),
        Command::ErgodicRate(a) => (ExperimentId::ErgodicRate, a),
        Command::ItoStokes(a) => (ExperimentId::ItoStokes, a),
        Command::SlowfastLimit(a) => (ExperimentId::SlowfastLimit, a),
        Command::DriverBounds(a) => (ExperimentId::DriverBounds, a),
        Command::ExampleConfig { experiment } => {
            return match experiment.parse::<ExperimentId>() {
                Ok(id) => {
                    let cfg = ExperimentConfig::example(id);
                    println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
    };
    match run(id, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
