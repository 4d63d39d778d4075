mod config;
mod runner;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gradcal::stream::write_stream_csv;
use gradcal::verify::{run_verification, Profile};

use config::{usage, ExperimentConfig, RunMode, UsageError};
use runner::Axis;

/// Seeded experiment runner for dynamic gradient calibration.
#[derive(Parser, Debug)]
#[command(name = "gradcal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Experiment config (TOML with dotted section keys)
    #[arg(long)]
    config: PathBuf,
    /// Output JSON-lines file; overrides `output_path`
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds`
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads (default: all cores)
    #[arg(long, env = "GRADCAL_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every configured method on every seed
    Run(RunArgs),
    /// Run the configured experiment across values of one hyperparameter
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Check the numerical properties of the engine
    Verify {
        /// quick or full
        #[arg(long, default_value = "quick")]
        profile: String,
    },
    /// Write the configured stream as CSV (`<out>` and `<out stem>.test.csv`)
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Data seed when the config sets no `stream.seed`
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run(args) => {
            let config = load(&args)?;
            let cells = vec![(None, config.clone())];
            run_cells(&args, &config, cells, None)
        }
        Command::Sweep { run, axis, values } => {
            let values = parse_values(&values)?;
            let config = load(&run)?;
            let cells = values
                .iter()
                .map(|&v| {
                    let train = axis.apply(&config.train, v).map_err(usage)?;
                    Ok((
                        Some((axis, v)),
                        ExperimentConfig {
                            train,
                            ..config.clone()
                        },
                    ))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            run_cells(&run, &config, cells, Some((axis, values)))
        }
        Command::Verify { profile } => {
            let profile: Profile = profile
                .parse()
                .map_err(|e: gradcal::Error| usage(e.to_string()))?;
            let report = run_verification(profile)?;
            for p in &report.properties {
                println!("{p}");
            }
            let passed = report.properties.iter().filter(|p| p.passed).count();
            println!("{passed}/{} properties pass", report.properties.len());
            Ok(if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            })
        }
        Command::GenData { config, out, seeds } => {
            let config = ExperimentConfig::load(&config)?;
            if config.mode != RunMode::Cil {
                return Err(usage(
                    "gen-data writes class-incremental streams; set mode = \"cil\"",
                ));
            }
            let seed = seeds
                .and_then(|s| s.first().copied())
                .unwrap_or(config.seeds[0]);
            let stream = config.build_stream(seed)?;
            let test = test_path(&out);
            write_stream_csv(&stream, &out, &test)?;
            println!(
                "wrote {} tasks to {} and {}",
                stream.len(),
                out.display(),
                test.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seeds) = &args.seeds {
        if seeds.is_empty() {
            return Err(usage("--seeds needs at least one seed"));
        }
        config.seeds = seeds.clone();
    }
    if let Some(out) = &args.out {
        config.output_path = out.clone();
    }
    Ok(config)
}

fn parse_values(raw: &[String]) -> anyhow::Result<Vec<f64>> {
    let values: Vec<f64> = raw
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("invalid sweep value `{s}`")))
        })
        .collect::<anyhow::Result<_>>()?;
    if values.is_empty() {
        return Err(usage("--values needs at least one value"));
    }
    Ok(values)
}

fn test_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.test.csv"))
}

fn run_cells(
    args: &RunArgs,
    config: &ExperimentConfig,
    cells: Vec<(Option<(Axis, f64)>, ExperimentConfig)>,
    sweep: Option<(Axis, Vec<f64>)>,
) -> anyhow::Result<ExitCode> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("cannot start worker threads")?;
    let records = pool.install(|| runner::execute(&cells));
    runner::write_outputs(&records, &config.output_path, &config.series_path())?;
    let rows = runner::summarize(&records);
    runner::write_summary(&rows, &config.summary_path())?;
    match sweep {
        Some((axis, values)) => print!("{}", runner::render_sweep_table(axis, &values, &rows)),
        None => print!("{}", runner::render_run_table(&rows)),
    }
    let failed: Vec<_> = records.iter().filter(|r| r.status != "ok").collect();
    for r in &failed {
        eprintln!(
            "run failed (seed {}, {}): {}",
            r.seed,
            r.method,
            r.error.as_deref().unwrap_or("unknown error")
        );
    }
    println!(
        "{} records appended to {}",
        records.len(),
        config.output_path.display()
    );
    Ok(if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUNTIME)
    })
}
