//! `gvi`: simulate UWB datasets, fit range-noise models, run the MAP and
//! ESGVI estimators, evaluate them, and run the Monte Carlo comparison.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gvi_core::io::{
    self, read_residuals, write_csv, write_json, write_residuals, write_summary, Dataset,
    EstimateOutput, ExperimentConfig, NoiseFitReport,
};
use gvi_core::metrics::{anees_bounds, summarize};
use gvi_core::noise::{fit_asym_cauchy, fit_gaussian, fit_gmm_em, fit_skew_laplace, NoiseModel};
use gvi_core::sim::{
    residual_predraw, run_monte_carlo, simulate_trajectory, stream_rng, ESGVI, MAP_C, MAP_GMM,
};
use gvi_core::Error;
use rand::Rng;

#[derive(Parser)]
#[command(name = "gvi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Esgvi,
    MapC,
    MapGmm,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Esgvi => ESGVI,
            Method::MapC => MAP_C,
            Method::MapGmm => MAP_GMM,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Gaussian,
    SkewLaplace,
    AsymCauchy,
    Gmm,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trial and write it as a dataset with truth, plus the
    /// residual pre-draw used for noise fitting.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Trial index; trial i reproduces Monte Carlo trial i.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Fit a range-noise model to a residual CSV (column `residual`).
    FitNoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: ModelKind,
        #[arg(long, default_value_t = 3)]
        components: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output JSON file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Run one estimator on a dataset directory.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Start ESGVI from the MAP-C solution; defaults to the config.
        #[arg(long)]
        warm_start: Option<bool>,
    },
    /// Score an estimate directory against a truth CSV or dataset directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Label for the estimator column.
        #[arg(long, value_enum, default_value_t = Method::Esgvi)]
        method: Method,
    },
    /// Simulate, fit, estimate with all three methods and evaluate, over all trials.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn load_config(common: &Common) -> gvi_core::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    if let Some(out) = &common.output {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(common: &Common, trial: usize) -> gvi_core::Result<()> {
    let cfg = load_config(common)?;
    let prov = cfg.provenance();
    let seed = stream_rng(cfg.sim.seed, trial as u64 + 1).random();
    let sim = simulate_trajectory(&cfg.sim, seed)?;
    let ds = Dataset::from_sim(&cfg.sim, &sim);
    ds.write(&cfg.output, &prov)?;
    write_residuals(
        &cfg.output.join("residuals.csv"),
        &prov,
        &residual_predraw(&cfg.sim),
    )?;
    write_json(&cfg.output.join("config.json"), &cfg)?;
    println!(
        "wrote {} poses, {} odometry and {} range records to {}",
        sim.truth.len(),
        ds.odometry.len(),
        ds.ranges.len(),
        cfg.output.display()
    );
    Ok(())
}

fn fit_noise(
    input: &Path,
    kind: ModelKind,
    components: usize,
    seed: u64,
    output: &Path,
) -> gvi_core::Result<()> {
    let samples = read_residuals(input)?;
    let (model, log_likelihood) = match kind {
        ModelKind::Gaussian => {
            fit_gaussian(&samples).map(|f| (NoiseModel::Gaussian(f.params), f.log_likelihood))?
        }
        ModelKind::SkewLaplace => fit_skew_laplace(&samples)
            .map(|f| (NoiseModel::SkewLaplace(f.params), f.log_likelihood))?,
        ModelKind::AsymCauchy => fit_asym_cauchy(&samples)
            .map(|f| (NoiseModel::AsymCauchy(f.params), f.log_likelihood))?,
        ModelKind::Gmm => fit_gmm_em(&samples, components, seed)
            .map(|f| (NoiseModel::Gmm(f.params), f.log_likelihood))?,
    };
    let report = NoiseFitReport {
        model,
        log_likelihood,
        samples: samples.len(),
    };
    write_json(output, &report)?;
    println!(
        "{} fit on {} samples, log-likelihood {log_likelihood}",
        report.model.kind(),
        report.samples
    );
    Ok(())
}

fn estimate(
    common: &Common,
    dataset: &Path,
    method: Method,
    warm_start: Option<bool>,
) -> gvi_core::Result<()> {
    let cfg = load_config(common)?;
    let ds = Dataset::read(dataset)?;
    let models = cfg.models()?;
    let warm = warm_start.unwrap_or(cfg.solver.warm_start);
    let out = io::estimate_dataset(&cfg, &ds, &models, method.name(), warm)?;
    out.write(&cfg.output, &cfg.provenance())?;
    let last = out.trace.last();
    println!(
        "{}: {} iterations, final objective {}, wrote {}",
        method.name(),
        out.trace.len(),
        last.map_or(f64::NAN, |r| r.loss),
        cfg.output.display()
    );
    Ok(())
}

fn evaluate(
    common: &Common,
    estimate: &Path,
    truth: &Path,
    method: Method,
) -> gvi_core::Result<()> {
    let cfg = load_config(common)?;
    let est = EstimateOutput::read(estimate)?;
    let truth = if truth.is_dir() {
        Dataset::read(truth)?
            .truth_trajectory()?
            .ok_or_else(|| Error::Data(format!("{} has no truth", truth.display())))?
    } else {
        io::read_trajectory(truth)?
    };
    let result = io::evaluate_estimate(&cfg, &est, &truth, method.name())?;
    let summary = summarize(std::slice::from_ref(&result))?;
    write_summary(&cfg.output, &cfg.provenance(), &summary)?;
    println!(
        "{}: RMSE {} rad, {} m, aNEES {}",
        result.estimator, result.rmse_rot, result.rmse_trans, result.anees
    );
    Ok(())
}

fn montecarlo(common: &Common, jobs: Option<usize>) -> gvi_core::Result<()> {
    let cfg = load_config(common)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;
    let report = pool.install(|| run_monte_carlo(&cfg.sim, &cfg.map, &cfg.solver))?;
    let prov = cfg.provenance();
    std::fs::create_dir_all(&cfg.output)?;
    if report.results.is_empty() {
        write_csv(&cfg.output.join("failures.csv"), &prov, &report.failures)?;
        return Err(Error::Solver(format!(
            "every trial failed; see {}",
            cfg.output.join("failures.csv").display()
        )));
    }
    let summary = summarize(&report.results)?;
    write_summary(&cfg.output, &prov, &summary)?;
    write_csv(
        &cfg.output.join("diagnostics.csv"),
        &prov,
        &report.diagnostics,
    )?;
    write_csv(&cfg.output.join("failures.csv"), &prov, &report.failures)?;
    write_json(&cfg.output.join("models.json"), &report.models)?;
    let (lo, hi) = anees_bounds(cfg.sim.poses, 3, 0.95)?;
    println!("estimator\ttrials\trmse_rot_rad\trmse_trans_m\tanees");
    for a in &summary.aggregate {
        println!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.3}",
            a.estimator, a.trials, a.rmse_rot_rad, a.rmse_trans_m, a.anees
        );
    }
    println!("per-trajectory aNEES 95% bounds: [{lo:.3}, {hi:.3}]");
    if !report.failures.is_empty() {
        println!(
            "{} estimator runs failed; see failures.csv",
            report.failures.len()
        );
    }
    Ok(())
}

/// 2 for configuration problems, 3 for bad input data, 4 for solver failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => 2,
        Error::Data(_)
        | Error::DegenerateData(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::EmptyOdometry
        | Error::RangeBeforeFirstPose(_)
        | Error::LengthMismatch(..)
        | Error::CovarianceNotSpd(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, trial } => simulate(common, *trial),
        Command::FitNoise {
            input,
            kind,
            components,
            seed,
            output,
        } => fit_noise(input, *kind, *components, *seed, output),
        Command::Estimate {
            common,
            dataset,
            method,
            warm_start,
        } => estimate(common, dataset, *method, *warm_start),
        Command::Evaluate {
            common,
            estimate,
            truth,
            method,
        } => evaluate(common, estimate, truth, *method),
        Command::Montecarlo { common, jobs } => montecarlo(common, *jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
