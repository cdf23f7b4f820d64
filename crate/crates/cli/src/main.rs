use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hubbard_dft::dataset::Method;
use hubbard_dft::pipeline::{BenchmarkTask, DatasetKind, Pipeline, RunConfig, StageOutput};
use hubbard_dft::vqe::Ansatz;

/// Learned density functionals for the Hubbard ring: data generation,
/// training and benchmarks.
///
/// Thread count comes from `RAYON_NUM_THREADS`.
#[derive(Parser)]
#[command(name = "hubbard-dft", version)]
struct Cli {
    /// Run config (TOML).
    #[arg(short, long, global = true, default_value = "run.toml")]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default config to the --config path.
    Init {
        #[arg(long)]
        force: bool,
    },
    GenPotentials,
    SolveEd,
    GenEve {
        /// Shot counts; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<u64>,
    },
    GenVqe {
        #[arg(long)]
        ansatz: Option<Ansatz>,
        /// Depths; defaults to the config lists.
        #[arg(long, value_delimiter = ',')]
        depth: Vec<usize>,
    },
    /// Cross-validated ensembles, e.g. `--dataset ed,eve-m1000`.
    Train {
        #[arg(long, value_delimiter = ',')]
        dataset: Vec<DatasetKind>,
    },
    Predict {
        #[arg(long, value_delimiter = ',')]
        dataset: Vec<DatasetKind>,
    },
    OptimizeDensity {
        #[arg(long, value_delimiter = ',')]
        dataset: Vec<DatasetKind>,
    },
    Benchmark {
        #[arg(long, default_value = "energy")]
        task: BenchmarkTask,
        #[arg(long)]
        method: Option<Method>,
    },
    Report,
    /// Every stage in order.
    Run,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::load(&cli.config)
        .with_context(|| format!("loading {} (create one with `hubbard-dft init`)", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.output {
        config.output = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn or_default<T: Clone>(given: &[T], default: impl FnOnce() -> Vec<T>) -> Vec<T> {
    if given.is_empty() {
        default()
    } else {
        given.to_vec()
    }
}

fn run(cli: Cli) -> Result<StageOutput> {
    if let Command::Init { force } = cli.command {
        anyhow::ensure!(
            force || !cli.config.exists(),
            "{} exists; pass --force to overwrite",
            cli.config.display()
        );
        let mut config = RunConfig::default();
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        if let Some(out) = cli.output {
            config.output = out;
        }
        std::fs::write(&cli.config, config.to_toml()?).with_context(|| format!("writing {}", cli.config.display()))?;
        return Ok(StageOutput {
            artifacts: vec![cli.config],
            notes: Vec::new(),
        });
    }
    let config = load_config(&cli)?;
    let p = Pipeline::new(config)?;
    let c = p.config().clone();
    let out = match cli.command {
        Command::Init { .. } => unreachable!(),
        Command::GenPotentials => p.gen_potentials()?,
        Command::SolveEd => p.solve_ed()?,
        Command::GenEve { shots } => p.gen_eve(&or_default(&shots, || c.shots.clone()))?,
        Command::GenVqe { ansatz, depth } => {
            let settings: Vec<(Ansatz, usize)> = c
                .vqe_settings()
                .into_iter()
                .filter(|(a, _)| ansatz.map_or(true, |x| x == *a))
                .filter(|(_, d)| depth.is_empty() || depth.contains(d))
                .chain(
                    // Depths outside the config lists are allowed when an ansatz is named.
                    ansatz.into_iter().flat_map(|a| {
                        depth
                            .iter()
                            .filter(|d| !c.vqe_settings().contains(&(a, **d)))
                            .map(move |&d| (a, d))
                            .collect::<Vec<_>>()
                    }),
                )
                .collect();
            anyhow::ensure!(!settings.is_empty(), "no VQE settings selected");
            p.gen_vqe(&settings)?
        }
        Command::Train { dataset } => p.train(&or_default(&dataset, || c.datasets()))?,
        Command::Predict { dataset } => p.predict(&or_default(&dataset, || c.datasets()))?,
        Command::OptimizeDensity { dataset } => {
            let default = p.density_kinds()?;
            p.optimize_density(&or_default(&dataset, || default))?
        }
        Command::Benchmark { task, method } => p.benchmark(task, method)?,
        Command::Report => p.report()?,
        Command::Run => p.run_all()?,
    };
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            for note in &out.notes {
                println!("{note}");
            }
            for path in &out.artifacts {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
