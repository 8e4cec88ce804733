use std::fs::OpenOptions;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use wgf_cli::compare::{compare, read_particles_csv, read_reference, CompareRow, Metric};
use wgf_cli::experiment::output_dir;
use wgf_cli::{load_config, run_experiment, CliError};

#[derive(Parser)]
#[command(name = "wgf", version, about = "Particle samplers for generalised variational inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `dotted.key=json` replacement applied before validation.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Distance from a particle snapshot to a reference file.
    Compare {
        particles: PathBuf,
        reference: PathBuf,
        #[arg(long, value_enum, default_value = "w1")]
        metric: MetricArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        resamples: usize,
        /// Append the row to this CSV instead of printing it.
        #[arg(long)]
        append: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    W1,
    Mmd,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            mut overrides,
        } => {
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = load_config(&config, &overrides)?;
            let dir = output_dir(&cfg, out.as_deref(), &config);
            let outcome = run_experiment(&cfg, &dir)?;
            println!("{}", outcome.out_dir.display());
            Ok(())
        }
        Command::Compare {
            particles,
            reference,
            metric,
            seed,
            resamples,
            append,
        } => {
            let metric = match metric {
                MetricArg::W1 => Metric::W1,
                MetricArg::Mmd => Metric::Mmd,
            };
            let p = read_particles_csv(&particles)?;
            let r = read_reference(&reference)?;
            let row = compare(&p, &r, metric, seed, resamples)?;
            match append {
                Some(path) => {
                    let fresh = !path.exists() || std::fs::metadata(&path)?.len() == 0;
                    let file = OpenOptions::new().create(true).append(true).open(&path)?;
                    let mut w = csv::Writer::from_writer(file);
                    if fresh {
                        w.write_record(CompareRow::HEADER)?;
                    }
                    w.write_record(row.fields())?;
                    w.flush()?;
                }
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    w.write_record(CompareRow::HEADER)?;
                    w.write_record(row.fields())?;
                    w.flush()?;
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
