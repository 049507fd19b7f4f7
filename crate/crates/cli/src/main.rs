mod report;
mod stages;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use zeroal::pipeline::ExperimentConfig;
use zeroal::Matrix;
use zeroal::select::Strategy;

use stages::Run;

#[derive(Parser)]
#[command(name = "zeroal", version, about = "Zero-round active learning experiments")]
struct Cli {
    /// Experiment config (TOML); defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the config's output_dir.
    #[arg(long, global = true, env = "ZEROAL_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a config file.
    Config {
        /// The built-in defaults.
        #[arg(long, conflicts_with = "smoke")]
        defaults: bool,
        /// A small, fast configuration.
        #[arg(long)]
        smoke: bool,
    },
    /// Generate or load the domain pair and carve the utility pool.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the utility dataset (JSON lines).
    SampleUtility {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of records; overrides the config.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Joint training of the extractor and the utility model.
    Train {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train the target-labeled reference model used by `optimal`.
        #[arg(long)]
        oracle: bool,
    },
    /// Select a batch from the target pool.
    Select {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        budget: usize,
    },
    /// Evaluate the selections of one strategy (or all) at every budget.
    Evaluate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Merge evaluation reports into one CSV.
    Report {
        /// Merge reports from different configs.
        #[arg(long)]
        force: bool,
        /// Destination (default: <out>/report.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Every stage for every configured seed.
    Run {
        /// Skip stages whose recorded hash matches the config.
        #[arg(long)]
        resume: bool,
        /// Only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse an output root that belongs to another config.
        #[arg(long)]
        force: bool,
    },
    /// Estimated utility of a set: target-pool points or raw embeddings.
    PredictSet {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated target-pool indices.
        #[arg(long, value_delimiter = ',', required_unless_present = "embeddings", conflicts_with = "embeddings")]
        indices: Vec<usize>,
        /// CSV of extractor embeddings, one member per line, fed straight to the utility model.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

/// Comma-separated numeric rows; blank lines are skipped.
fn read_matrix(path: &PathBuf) -> Result<Matrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .with_context(|| format!("{}:{}: not a numeric row", path.display(), n + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows)?)
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    if let Command::Config { smoke, .. } = cli.cmd {
        let cfg = if smoke { ExperimentConfig::smoke() } else { ExperimentConfig::default() };
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let mut cfg = load_config(cli.config.as_ref())?;
    if let Command::SampleUtility { n: Some(n), .. } = cli.cmd {
        cfg.usample.n_records = n;
    }
    cfg.validate()?;
    let root = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("zeroal-out"));
    let run = |seed| Run {
        cfg: &cfg,
        root: root.clone(),
        seed,
        resume: false,
    };
    match cli.cmd {
        Command::Config { .. } => unreachable!(),
        Command::GenData { seed } => {
            run(seed).gen_data()?;
        }
        Command::SampleUtility { seed, .. } => {
            run(seed).sample_utility()?;
        }
        Command::Train { seed, oracle } => {
            if oracle {
                run(seed).train_oracle()?;
            } else {
                run(seed).train()?;
            }
        }
        Command::Select { seed, strategy, budget } => {
            run(seed).select(strategy, budget)?;
        }
        Command::Evaluate { seed, strategy } => {
            let r = run(seed);
            match strategy {
                Some(s) => {
                    r.evaluate(s)?;
                }
                None => {
                    for &s in &cfg.select.strategies {
                        r.evaluate(s)?;
                    }
                }
            }
        }
        Command::Report { force, output } => {
            let paths = report::find_reports(&root)?;
            let merged = report::merge(&paths, force)?;
            let dest = output.unwrap_or_else(|| root.join("report.csv"));
            fs::write(&dest, &merged.csv).with_context(|| format!("writing {}", dest.display()))?;
            log::info!(
                "{} mean rows, {} per-seed rows -> {}",
                merged.mean_rows,
                merged.seed_rows,
                dest.display()
            );
        }
        Command::Run { resume, seed, force } => {
            stages::write_manifest(&root, &cfg, force || resume)?;
            let seeds = match seed {
                Some(s) => vec![s],
                None => cfg.eval.seeds.clone(),
            };
            let outcomes: Vec<Result<Vec<String>>> = seeds
                .par_iter()
                .map(|&s| {
                    Run {
                        cfg: &cfg,
                        root: root.clone(),
                        seed: s,
                        resume,
                    }
                    .all()
                })
                .collect();
            let mut failed = 0;
            for (s, o) in seeds.iter().zip(outcomes) {
                match o {
                    Ok(ran) => log::info!("seed {s}: {} stages ran", ran.len()),
                    Err(e) => {
                        log::error!("{e:#}");
                        failed += 1;
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} of {} seeds failed; partial artifacts kept in {}", seeds.len(), root.display());
            }
            let merged = report::merge(&report::find_reports(&root)?, force)?;
            fs::write(root.join("report.csv"), &merged.csv)?;
        }
        Command::PredictSet { seed, indices, embeddings } => {
            let r = run(seed);
            let models = r.load_models()?;
            let u = match embeddings {
                Some(path) => models.deepsets.predict(&read_matrix(&path)?)?,
                None => {
                    let prep = r.load_data()?;
                    let x = prep.pair.target_pool().features();
                    if let Some(&i) = indices.iter().find(|&&i| i >= x.rows()) {
                        bail!("index {i} outside the target pool of {} points", x.rows());
                    }
                    models.predict_set(&x.select_rows(&indices))?
                }
            };
            println!("{u}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
