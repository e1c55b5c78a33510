use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use priorreg::hnn::{make_hnn_dataset, regularizer_points, train_hnn, HnnRegularizer};
use priorreg::oracles::make_dataset;
use priorreg::training::{split_validation, train, LossWeights, TrainConfig};
use priorreg_harness::config::{ExperimentConfig, Scale, TaskConfig, PRESETS};
use priorreg_harness::experiment::{repeatability_run, run_experiment, seed_dir};
use priorreg_harness::report::{read_report, write_report, ReportRow, REPORT_COLUMNS};
use priorreg_harness::{preset, HarnessError, Result};

#[derive(Parser)]
#[command(name = "priorreg", version, about = "Train and tune prior-regularized surrogates")]
struct Cli {
    /// Seed for data, initialization and the outer loop.
    #[arg(long, global = true, env = "PRIORREG_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    /// Worker threads for multi-seed runs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Experiment config JSON; overrides `--preset`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset for a case and seed.
    GenerateData {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train one network; with no `--lambda` the priors are left out.
    Train {
        #[arg(long)]
        preset: Option<String>,
        /// Prior weights, one per prior.
        #[arg(long = "lambda", num_args = 1..)]
        lambdas: Vec<f64>,
    },
    /// Baseline, weight-decay sweep and outer-loop search for one seed.
    Tune {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Repeat a case over several seeds and write its report.
    Reproduce {
        preset: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Collect every report under a directory into one summary.
    Report { dir: PathBuf },
    /// Print the preset names.
    Presets,
}

fn resolve(cli: &Cli, name: Option<&str>) -> Result<ExperimentConfig> {
    if let Some(path) = &cli.config {
        return ExperimentConfig::load(path);
    }
    let name = name.ok_or_else(|| HarnessError::Config("give --preset or --config".into()))?;
    preset(name, cli.scale)
}

fn print_rows(rows: &[ReportRow]) {
    println!("{}", REPORT_COLUMNS.join(","));
    for r in rows {
        println!("{}", r.to_record().join(","));
    }
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "report.csv") {
            found.push(p);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Presets => {
            PRESETS.iter().for_each(|p| println!("{p}"));
        }
        Command::GenerateData { preset } => {
            let cfg = resolve(&cli, preset.as_deref())?;
            let dir = seed_dir(&cli.out, &cfg.name, cli.seed);
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("dataset.json");
            match &cfg.task {
                TaskConfig::Pde(t) => {
                    make_dataset(&t.oracle, &t.grid, t.n_train, t.noise, t.n_colloc, cli.seed)?.save(&path)?
                }
                TaskConfig::Hamiltonian(h) => make_hnn_dataset(
                    &h.system,
                    h.n_train_traj,
                    h.n_val_traj,
                    h.n_test,
                    h.t_span,
                    h.dt,
                    h.sigma,
                    cli.seed,
                )?
                .save(&path)?,
            }
            println!("{}", path.display());
        }
        Command::Train { preset, lambdas } => {
            let cfg = resolve(&cli, preset.as_deref())?;
            let dir = seed_dir(&cli.out, &cfg.name, cli.seed);
            std::fs::create_dir_all(&dir)?;
            let tc = TrainConfig {
                seed: cli.seed,
                ..cfg.train.clone()
            };
            let lambdas = if lambdas.is_empty() {
                cfg.search.fixed_lambdas.clone().unwrap_or_default()
            } else {
                lambdas.clone()
            };
            let model = match &cfg.task {
                TaskConfig::Pde(t) => {
                    let data = make_dataset(&t.oracle, &t.grid, t.n_train, t.noise, t.n_colloc, cli.seed)?;
                    let (fit, _) = split_validation(&data, t.validation_fraction, cli.seed)?;
                    let priors = if lambdas.is_empty() { &[][..] } else { &t.priors[..] };
                    train(&tc, &fit, priors, &LossWeights::new(lambdas)?)?
                }
                TaskConfig::Hamiltonian(h) => {
                    let ds = make_hnn_dataset(
                        &h.system,
                        h.n_train_traj,
                        h.n_val_traj,
                        h.n_test,
                        h.t_span,
                        h.dt,
                        h.sigma,
                        cli.seed,
                    )?;
                    let train_set = ds.train_samples();
                    let reg = lambdas.first().map(|&lambda| HnnRegularizer {
                        spec: h.prior,
                        lambda,
                        mode: h.mode,
                        points: regularizer_points(&train_set, h.reg_extra_points, cli.seed),
                    });
                    train_hnn(&tc, &train_set, &ds.validation_samples(), reg)?
                }
            };
            let path = dir.join("model.json");
            model.save(&path)?;
            println!("{}\ttest={:e}", path.display(), model.final_test_mse);
        }
        Command::Tune { preset } => {
            let cfg = resolve(&cli, preset.as_deref())?;
            let o = run_experiment(&cfg, cli.seed, &cli.out)?;
            print_rows(&[o.row]);
        }
        Command::Reproduce { preset: name, seeds } => {
            let cfg = resolve(&cli, Some(name))?;
            let seeds = if !seeds.is_empty() {
                seeds.clone()
            } else if !cfg.seeds.is_empty() {
                cfg.seeds.clone()
            } else {
                vec![cli.seed]
            };
            let o = repeatability_run(&cfg, &seeds, &cli.out, cli.workers)?;
            let mut rows = o.rows;
            rows.push(o.aggregate);
            print_rows(&rows);
        }
        Command::Report { dir } => {
            let mut found = Vec::new();
            find_reports(dir, &mut found)?;
            if found.is_empty() {
                return Err(HarnessError::Config(format!("no report.csv under {}", dir.display())));
            }
            let mut rows = Vec::new();
            for p in &found {
                rows.extend(read_report(p)?.into_iter().filter(|r| r.flags.iter().any(|f| f == "aggregate")));
            }
            write_report(&dir.join("summary.csv"), &rows)?;
            print_rows(&rows);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        log::error!("{e}");
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
