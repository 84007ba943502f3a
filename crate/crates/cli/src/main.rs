use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msinvert::{run_case, sweep, validate, CliError, ExperimentConfig, RawConfig, OUTPUT_ENV};

#[derive(Parser)]
#[command(name = "msinvert", version, about = "Generalized multiscale inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSVs and report.
    Run { config: PathBuf },
    /// Check a config and print cell sets, snap residuals and problem sizes.
    Validate { config: PathBuf },
    /// Repeat an experiment for several values of one key.
    Sweep {
        config: PathBuf,
        /// `section.key=v1,v2,...`
        #[arg(long)]
        vary: String,
    },
}

fn output_override() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = output_override() {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let s = run_case(&cfg)?;
            let fin = s.final_terms();
            println!(
                "J {:.6e} -> {:.6e} after {} iterations ({:?}); error rms {:.6e} -> {:.6e}; output in {}",
                s.initial().total,
                fin.total,
                s.state.iteration,
                s.stop,
                s.errors.aggregate_initial(),
                s.errors.aggregate_final(),
                s.output_dir.display()
            );
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            print!("{}", validate(&cfg)?);
        }
        Command::Sweep { config, vary } => {
            let (key, values) = vary
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--vary expects key=v1,v2,..., got `{vary}`")))?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", config.display())))?;
            let raw = RawConfig::parse(&text)?;
            let base = config.parent().unwrap_or(Path::new("."));
            for (value, s) in sweep(&raw, base, key.trim(), &values, output_override().as_deref())? {
                println!("{key}={value}: final J {:.6e}, error rms {:.6e}", s.final_terms().total, s.errors.aggregate_final());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msinvert: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
