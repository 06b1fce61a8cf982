//! `nmix`: simulate, fit and summarise N-mixture models from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 unparseable input,
//! 4 model error (invalid data or design), 5 numerical failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nmix::config::ExperimentConfig;
use nmix::dataset::{write_truth, DatasetFile};
use nmix::experiment::{self, BiasModel};
use nmix::{simulate, ErrorKind};

#[derive(Parser)]
#[command(name = "nmix", version, about = "N-mixture abundance models")]
struct Cli {
    /// Configuration file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for simulation, posterior sampling and the bias experiment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for output files (overrides `output_dir`).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Extra configuration as `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ModelArgs {
    /// Dataset CSV; without it the configured simulation is used.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `poisson` or `nb`.
    #[arg(long)]
    family: Option<String>,
    /// `ml` or `laplace`.
    #[arg(long)]
    engine: Option<String>,
    /// Comma-separated abundance covariates.
    #[arg(long)]
    abundance: Option<String>,
    /// Comma-separated detection covariates.
    #[arg(long)]
    detection: Option<String>,
    /// Posterior draws.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write averaged and survey-level versions plus the truth.
    Simulate {
        #[arg(long)]
        n_sites: Option<usize>,
        #[arg(long)]
        n_surveys: Option<usize>,
        #[arg(long)]
        n_years: Option<usize>,
    },
    /// Fit a model and write fit.json.
    Fit(ModelArgs),
    /// Posterior summaries of every row's expected abundance (laplace only).
    LambdaFitted(ModelArgs),
    /// Posterior distribution of the latent abundance for selected rows (laplace only).
    PosteriorN {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated 1-based rows.
        #[arg(long)]
        rows: Option<String>,
        /// Largest N on the grid.
        #[arg(long)]
        n_grid_max: Option<u32>,
    },
    /// Monte Carlo study of bias from averaging a survey-level detection covariate.
    BiasExperiment {
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        a4_min: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        a4_max: Option<f64>,
    },
}

enum Failure {
    Usage(String),
    Library(nmix::Error),
}

impl From<nmix::Error> for Failure {
    fn from(e: nmix::Error) -> Self {
        Failure::Library(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Library(nmix::Error::Io(e))
    }
}

type CliResult<T> = Result<T, Failure>;

fn set(cfg: &mut ExperimentConfig, key: &str, value: impl ToString) -> CliResult<()> {
    cfg.set(key, &value.to_string())
        .map_err(|e| Failure::Usage(format!("--{}: {e}", key.replace('_', "-"))))
}

fn apply_model_args(cfg: &mut ExperimentConfig, args: &ModelArgs) -> CliResult<()> {
    if let Some(d) = &args.dataset {
        set(cfg, "dataset", d.display())?;
    }
    for (key, value) in [
        ("family", &args.family),
        ("engine", &args.engine),
        ("abundance", &args.abundance),
        ("detection", &args.detection),
    ] {
        if let Some(v) = value {
            set(cfg, key, v)?;
        }
    }
    if let Some(m) = args.samples {
        set(cfg, "samples", m)?;
    }
    Ok(())
}

fn build_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &cli.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got {item:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| Failure::Usage(format!("--set {item}: {e}")))?;
    }
    if let Some(seed) = cli.seed {
        set(&mut cfg, "seed", seed)?;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    match &cli.command {
        Command::Simulate {
            n_sites,
            n_surveys,
            n_years,
        } => {
            for (key, value) in [("n_sites", n_sites), ("n_surveys", n_surveys), ("n_years", n_years)] {
                if let Some(v) = value {
                    set(&mut cfg, key, v)?;
                }
            }
        }
        Command::Fit(args) | Command::LambdaFitted(args) => apply_model_args(&mut cfg, args)?,
        Command::PosteriorN { model, rows, n_grid_max } => {
            apply_model_args(&mut cfg, model)?;
            if let Some(r) = rows {
                set(&mut cfg, "rows", r)?;
            }
            if let Some(n) = n_grid_max {
                set(&mut cfg, "n_grid_max", n)?;
            }
        }
        Command::BiasExperiment { runs, a4_min, a4_max } => {
            if let Some(r) = runs {
                set(&mut cfg, "runs", r)?;
            }
            if let Some(a) = a4_min {
                set(&mut cfg, "a4_min", a)?;
            }
            if let Some(a) = a4_max {
                set(&mut cfg, "a4_max", a)?;
            }
        }
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn output_file(cfg: &ExperimentConfig, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.join(name))
}

fn write_with<F>(path: &Path, write: F) -> CliResult<()>
where
    F: FnOnce(&mut io::BufWriter<fs::File>) -> nmix::Result<()>,
{
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    write(&mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_simulate(cfg: &ExperimentConfig) -> CliResult<()> {
    let sim = simulate(&cfg.sim)?;
    let avg = output_file(cfg, "sim_avg.csv")?;
    let full = output_file(cfg, "sim_full.csv")?;
    let truth = output_file(cfg, "sim_truth.csv")?;
    DatasetFile::from_sim_avg(&sim).write(&avg)?;
    DatasetFile::from_sim_full(&sim).write(&full)?;
    write_with(&truth, |w| write_truth(&sim, w))?;

    let mut lambda = sim.true_lambda_rows();
    lambda.sort_by(f64::total_cmp);
    let q = |p: f64| nmix::fit_bayes::quantile_type7(&lambda, p);
    let total_n: u64 = sim.true_n_rows().iter().map(|&n| u64::from(n)).sum();
    println!(
        "simulated {} sites x {} years x {} surveys (seed {})",
        cfg.sim.n_sites, cfg.sim.n_years, cfg.sim.n_surveys, cfg.sim.seed
    );
    println!(
        "true lambda: min {:.4}  q1 {:.4}  median {:.4}  q3 {:.4}  max {:.4}",
        q(0.0),
        q(0.25),
        q(0.5),
        q(0.75),
        q(1.0)
    );
    println!("total true N: {total_n}, total lambda: {:.1}", lambda.iter().sum::<f64>());
    for path in [avg, full, truth] {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_fit(cfg: &ExperimentConfig) -> CliResult<()> {
    let data = experiment::load_data(cfg)?;
    let (_, report) = experiment::run_fit(cfg, &data)?;
    print!("{report}");
    let path = output_file(cfg, "fit.json")?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Library(nmix::Error::NonFinite(e.to_string())))?;
    fs::write(&path, json + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_lambda_fitted(cfg: &ExperimentConfig) -> CliResult<()> {
    let data = experiment::load_data(cfg)?;
    let (_, summaries) = experiment::run_lambda_fitted(cfg, &data)?;
    let path = output_file(cfg, "lambda_fitted.csv")?;
    write_with(&path, |w| experiment::write_lambda_fitted_csv(&summaries, w))?;
    println!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>10}", "index", "mean", "sd", "q025", "median", "q975");
    for s in summaries.iter().take(6) {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.index + 1,
            s.mean,
            s.sd,
            s.q025,
            s.median,
            s.q975
        );
    }
    if summaries.len() > 6 {
        println!("... {} more rows", summaries.len() - 6);
    }
    let total: f64 = summaries.iter().map(|s| s.median).sum();
    println!("sum of posterior medians: {total:.3}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_posterior_n(cfg: &ExperimentConfig) -> CliResult<()> {
    let data = experiment::load_data(cfg)?;
    let posteriors = experiment::run_posterior_n(cfg, &data)?;
    let path = output_file(cfg, "posterior_n.csv")?;
    write_with(&path, |w| experiment::write_posterior_n_csv(&posteriors, w))?;
    for post in &posteriors {
        let (mode, p_mode) = post
            .probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, p)| (post.n_min + k as u32, *p))
            .unwrap_or((post.n_min, 0.0));
        println!(
            "row {} (site {}, year {}): N >= {}, mode {mode} (p {p_mode:.4}), mean {:.3}",
            post.row,
            post.label.site,
            post.label.year,
            post.n_min,
            post.mean()
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_bias_experiment(cfg: &ExperimentConfig) -> CliResult<()> {
    let records = experiment::bias_experiment(cfg)?;
    let path = output_file(cfg, "bias.csv")?;
    write_with(&path, |w| experiment::write_bias_csv(&records, w))?;
    let failed = records.iter().filter(|r| r.failed).count();
    println!("{} runs, {} records, {failed} from failed fits", cfg.runs, records.len());
    println!(
        "{:<9} {:<6} {:>14} {:>14} {:>9}",
        "model", "param", "|a4|>2 median", "|a4|<1 median", "rank cor"
    );
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    for s in experiment::summarize_bias(&records) {
        println!(
            "{:<9} {:<6} {:>14} {:>14} {:>9.3}",
            match s.model {
                BiasModel::True => "true",
                BiasModel::Averaged => "averaged",
            },
            s.parameter,
            fmt(s.median_abs_bias_strong),
            fmt(s.median_abs_bias_weak),
            s.rank_correlation
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    if threads.is_some_and(|n| n > 1) {
        eprintln!("nmix: built without the parallel feature; running on one thread");
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Simulate { .. } => cmd_simulate(&cfg),
        Command::Fit(_) => cmd_fit(&cfg),
        Command::LambdaFitted(_) => cmd_lambda_fitted(&cfg),
        Command::PosteriorN { .. } => cmd_posterior_n(&cfg),
        Command::BiasExperiment { .. } => cmd_bias_experiment(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("nmix: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Library(e)) => {
            eprintln!("nmix: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(match e.kind() {
                ErrorKind::Io => 1,
                ErrorKind::Parse => 3,
                ErrorKind::Model => 4,
                ErrorKind::Numeric => 5,
            })
        }
    }
}
