use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use dlora_sim::harness::{self, ExperimentConfig};
use dlora_sim::scenario;
use dlora_sim::scheduler;
use dlora_sim::{gap, Error, Result};

#[derive(Parser)]
#[command(
    name = "dlora-sim",
    version,
    about = "Federated LoRA over a vehicular network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment and write metrics and plot data.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the scenario, data and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// One ARBVS decision for a vehicle snapshot. JSON on stdout, a table on stderr.
    Schedule {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        rank_cap: usize,
        /// Radio, model and epoch settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Truncated-SVD gap report for one or more gradient matrices.
    Gap {
        /// Headerless CSV of one matrix; repeat for several layers.
        #[arg(long, required = true)]
        matrix: Vec<PathBuf>,
        #[arg(long)]
        rank: usize,
        #[arg(long = "M")]
        m: f64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Average-gradient bound over rank and participant-count grids, as CSV.
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
        let row = record
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.into(),
                    message: format!("row {}: {s:?}: {e}", rows.len() + 1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse {
            path: path.into(),
            message: "expected a non-empty rectangular matrix".into(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            config,
            seed,
            threads,
            output,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(dir) = output {
                cfg.output_dir = dir;
            }
            let run = harness::run_experiment(&cfg)?;
            harness::emit_outputs(&run.metrics, &run.decisions, &cfg, &cfg.output_dir)?;
            if let Some(last) = run.metrics.last() {
                println!(
                    "{} rounds, final accuracy {:.4}, uplink {} bits, simulated {:.1} s -> {}",
                    run.metrics.len(),
                    last.test_acc,
                    last.uplink_bits_cum,
                    last.sim_time_s,
                    cfg.output_dir.display()
                );
            }
        }
        Command::Schedule {
            snapshot,
            rank_cap,
            config,
        } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::default(),
            };
            let vehicles = scenario::load_snapshot(&snapshot)?;
            let env = cfg.scheduler_env()?;
            let decision = scheduler::arbvs_schedule(
                &vehicles,
                &env,
                &cfg.objective_params()?,
                rank_cap,
                cfg.bisection_eps,
            )?;
            println!("{}", to_json(&decision));
            eprint!("{}", decision.to_table());
        }
        Command::Gap {
            matrix,
            rank,
            m,
            format,
        } => {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::InvalidArgument(format!("M must be >= 0, got {m}")));
            }
            let gradients = matrix
                .iter()
                .map(|p| read_matrix(p))
                .collect::<Result<Vec<_>>>()?;
            let report = gap::gap_report(&gradients, rank, m)?;
            match format {
                Format::Json => println!("{}", to_json(&report)),
                Format::Csv => {
                    println!("layer,k,residual_norm,bound,ok,precondition_ok");
                    for (i, l) in report.layers.iter().enumerate() {
                        println!(
                            "{i},{},{},{},{},{}",
                            l.singular_count(),
                            l.residual_norm,
                            l.bound,
                            l.ok,
                            l.precondition_ok
                        );
                    }
                    println!(
                        "total,,{},{},{},",
                        report.total_residual, report.total_bound, report.bound_satisfied
                    );
                }
            }
        }
        Command::Bound { config, seed } => {
            let cfg = load_config(&config, seed)?;
            let estimate = if cfg.loss_init.is_none() || cfg.loss_star.is_none() {
                harness::loss_estimates(&harness::run_experiment(&cfg)?.metrics)
            } else {
                None
            };
            let params = cfg.bound_params(estimate)?;
            params.validate()?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for point in harness::bound_curves(&cfg, &params)? {
                w.serialize(point).map_err(|source| Error::Csv {
                    path: "<stdout>".into(),
                    source,
                })?;
            }
            w.flush().map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
