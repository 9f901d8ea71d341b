//! Planar robot simulation with UWB ranging, NLOS-style range corruption,
//! and the Monte Carlo comparison of MAP-C, MAP-GMM and ESGVI.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esgvi::{self, SolverConfig};
use crate::graph::{build_graph, FactorGraph, GraphLayout, OdometryRecord, ProcessNoise, RangeRecord, Trajectory};
use crate::liegroup::{exp_map, LieState, Pose2, Side};
use crate::map::{map_solve, MapConfig};
use crate::metrics::{pose_errors, TrialResult};
use crate::noise::{
    fit_asym_cauchy, fit_gmm_em, fit_skew_laplace, AsymCauchyParams, GmmParams, NoiseModel, SkewLaplaceParams,
};
use crate::trace::TraceRecord;

pub const MAP_C: &str = "map-c";
pub const MAP_GMM: &str = "map-gmm";
pub const ESGVI: &str = "esgvi";

/// Nominal body-frame inputs `(ω, v)` with zero lateral velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputProfile {
    /// `ω = ω₀ + a_ω sin(2π t / T_ω)`, `v = v₀ + a_v sin(2π t / T_v)`
    Sinusoid {
        omega_mean: f64,
        omega_amplitude: f64,
        omega_period: f64,
        speed_mean: f64,
        speed_amplitude: f64,
        speed_period: f64,
    },
    Constant { omega: f64, speed: f64 },
}

impl Default for InputProfile {
    fn default() -> Self {
        InputProfile::Sinusoid {
            omega_mean: 0.25,
            omega_amplitude: 0.15,
            omega_period: 13.0,
            speed_mean: 0.5,
            speed_amplitude: 0.1,
            speed_period: 9.0,
        }
    }
}

impl InputProfile {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        use std::f64::consts::TAU;
        match *self {
            InputProfile::Sinusoid {
                omega_mean,
                omega_amplitude,
                omega_period,
                speed_mean,
                speed_amplitude,
                speed_period,
            } => Vector3::new(
                omega_mean + omega_amplitude * (TAU * t / omega_period).sin(),
                speed_mean + speed_amplitude * (TAU * t / speed_period).sin(),
                0.0,
            ),
            InputProfile::Constant { omega, speed } => Vector3::new(omega, speed, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub trials: usize,
    pub poses: usize,
    /// Estimator state rate; the state period is the time step `Δt`.
    pub state_rate: f64,
    pub odometry_rate: f64,
    pub range_rate: f64,
    pub anchors: Vec<[f64; 2]>,
    pub tags: Vec<[f64; 2]>,
    pub inputs: InputProfile,
    /// Nominal initial pose `(θ, x, y)`; the true one is drawn around it.
    pub start: [f64; 3],
    /// Prior standard deviations of `(θ, x, y)`.
    pub prior_std: [f64; 3],
    pub process: ProcessNoise,
    pub range_sigma: f64,
    pub corruption_fraction: f64,
    /// Corruption bounds in units of `range_sigma`.
    pub corruption_sigmas: [f64; 2],
    pub fit_samples: usize,
    pub gmm_components: usize,
    pub side: Side,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let h = 40f64.sqrt() / 2.0;
        Self {
            trials: 50,
            poses: 400,
            state_rate: 10.0,
            odometry_rate: 100.0,
            range_rate: 10.0,
            anchors: vec![[-h, -h], [h, -h], [h, h], [-h, h]],
            tags: vec![[0.2, 0.15], [0.2, -0.15], [-0.2, 0.15], [-0.2, -0.15]],
            inputs: InputProfile::default(),
            start: [0.0, 0.0, -2.0],
            prior_std: [0.02, 0.05, 0.05],
            process: ProcessNoise {
                psd: [3e-4, 4e-3, 4e-3],
                lateral_inflation: 4.0,
            },
            range_sigma: 0.3,
            corruption_fraction: 0.25,
            corruption_sigmas: [1.0, 6.0],
            fit_samples: 5000,
            gmm_components: 3,
            side: Side::Right,
            seed: 1,
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("simulation: {what}")));
        if self.trials == 0 || self.poses < 2 {
            return bad("need at least one trial and two poses");
        }
        if !positive(self.state_rate) || !positive(self.odometry_rate) || !positive(self.range_rate) {
            return bad("rates must be positive");
        }
        let ratio = self.odometry_rate / self.state_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return bad("odometry rate must be an integer multiple of the state rate");
        }
        let ratio = self.odometry_rate / self.range_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return bad("odometry rate must be an integer multiple of the range rate");
        }
        if self.anchors.is_empty() || self.tags.is_empty() {
            return bad("need anchors and tags");
        }
        if self.process.psd.iter().any(|q| !(*q >= 0.0 && q.is_finite()))
            || !positive(self.process.lateral_inflation)
            || self.prior_std.iter().any(|s| !positive(*s))
        {
            return bad("noise levels must be finite, prior deviations positive");
        }
        if !positive(self.range_sigma) {
            return bad("range sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return bad("corruption fraction must lie in [0, 1]");
        }
        let [lo, hi] = self.corruption_sigmas;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad("corruption bounds must satisfy 0 ≤ lo ≤ hi");
        }
        if self.fit_samples < 10 || self.gmm_components == 0 {
            return bad("need at least 10 fit samples and one mixture component");
        }
        Ok(())
    }

    pub fn anchor_points(&self) -> Vec<Vector2<f64>> {
        self.anchors.iter().map(|a| Vector2::new(a[0], a[1])).collect()
    }

    pub fn tag_offsets(&self) -> Vec<Vector2<f64>> {
        self.tags.iter().map(|a| Vector2::new(a[0], a[1])).collect()
    }

    pub fn prior_mean(&self) -> Pose2 {
        Pose2::from_triple(self.start[0], self.start[1], self.start[2])
    }

    pub fn prior_covariance(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.prior_std).map(|s| s * s))
    }

    pub fn layout(&self) -> GraphLayout {
        GraphLayout {
            state_rate: self.state_rate,
            process: self.process,
            side: self.side,
        }
    }

    /// Odometry samples per state period.
    fn substeps(&self) -> usize {
        (self.odometry_rate / self.state_rate).round() as usize
    }
}

/// Generator for stream `stream` of the master seed. Stream 0 feeds the
/// noise-fitting pre-draw, stream `i + 1` trial `i`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Ground truth on the estimator's state grid.
    pub truth: Trajectory<Pose2>,
    pub odometry: Vec<OdometryRecord>,
    pub ranges: Vec<RangeRecord>,
    /// `true` for corrupted (NLOS) ranges.
    pub nlos: Vec<bool>,
}

/// One run: truth propagated with the nominal inputs, odometry measured with
/// white noise of PSD `Q_c`, and ranges from every tag to every anchor.
pub fn simulate_trajectory(cfg: &SimConfig, seed: u64) -> Result<SimOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / cfg.odometry_rate;
    let substeps = cfg.substeps();
    let n_odo = (cfg.poses - 1) * substeps;
    let range_every = (cfg.odometry_rate / cfg.range_rate).round() as usize;
    let anchors = cfg.anchor_points();
    let tags = cfg.tag_offsets();
    // discrete white noise equivalent to the un-inflated PSD over one sample;
    // lateral inflation only widens the estimator's process model
    let odo_std = Vector3::from(cfg.process.psd).map(|q| (q / dt).sqrt());
    let prior_l = cfg.prior_covariance().map(f64::sqrt);

    let z0 = Vector3::from_fn(|_, _| normal(&mut rng));
    let mut x = cfg.prior_mean().oplus(&(prior_l * z0), Side::Right);
    let mut truth = Vec::with_capacity(cfg.poses);
    let mut times = Vec::with_capacity(cfg.poses);
    let mut odometry = Vec::with_capacity(n_odo);
    let mut clean = Vec::new();
    for j in 0..=n_odo {
        let t = j as f64 * dt;
        if j % substeps == 0 {
            truth.push(x);
            times.push(t);
        }
        if j % range_every == 0 {
            for (ti, tag) in tags.iter().enumerate() {
                for (ai, anchor) in anchors.iter().enumerate() {
                    clean.push(RangeRecord {
                        t,
                        tag: ti,
                        anchor: ai,
                        range: crate::graph::range_predict(&x, anchor, tag),
                    });
                }
            }
        }
        if j == n_odo {
            break;
        }
        let u = cfg.inputs.at(t);
        let w = Vector3::from_fn(|i, _| odo_std[i] * normal(&mut rng));
        odometry.push(OdometryRecord {
            t,
            omega: u[0] + w[0],
            vx: u[1] + w[1],
            vy: u[2] + w[2],
        });
        x = x.compose(&exp_map(&(u * dt)));
    }
    let (ranges, nlos) = corrupt_ranges(
        &clean,
        cfg.range_sigma,
        cfg.corruption_fraction,
        cfg.corruption_sigmas,
        rng.random(),
    )?;
    Ok(SimOutput {
        truth: Trajectory::new(truth, times)?,
        odometry,
        ranges,
        nlos,
    })
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// One residual of the range noise: `N(0, σ²)` plus, with probability
/// `fraction`, a positive bias `U(lo σ, hi σ)`.
fn corruption_draw<R: Rng + ?Sized>(rng: &mut R, sigma: f64, fraction: f64, [lo, hi]: [f64; 2]) -> (f64, bool) {
    let gaussian = sigma * normal(rng);
    let corrupted = rng.random::<f64>() < fraction;
    let bias = if corrupted {
        if hi > lo {
            rng.random_range(lo * sigma..hi * sigma)
        } else {
            lo * sigma
        }
    } else {
        0.0
    };
    (gaussian + bias, corrupted)
}

/// Adds Gaussian noise to every range and a positive uniform bias to a
/// Bernoulli(`fraction`) subset, which the returned flags mark.
pub fn corrupt_ranges(
    clean: &[RangeRecord],
    sigma: f64,
    fraction: f64,
    bounds: [f64; 2],
    seed: u64,
) -> Result<(Vec<RangeRecord>, Vec<bool>)> {
    if !positive(sigma) || !(0.0..=1.0).contains(&fraction) || !(bounds[0] >= 0.0 && bounds[0] <= bounds[1]) {
        return Err(Error::InvalidParameter(format!(
            "corruption σ {sigma}, fraction {fraction}, bounds {bounds:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(clean
        .iter()
        .map(|r| {
            let (noise, flag) = corruption_draw(&mut rng, sigma, fraction, bounds);
            (RangeRecord { range: r.range + noise, ..*r }, flag)
        })
        .unzip())
}

/// Range residuals for noise-model fitting, drawn from stream 0.
pub fn residual_predraw(cfg: &SimConfig) -> Vec<f64> {
    let mut rng = stream_rng(cfg.seed, 0);
    (0..cfg.fit_samples)
        .map(|_| corruption_draw(&mut rng, cfg.range_sigma, cfg.corruption_fraction, cfg.corruption_sigmas).0)
        .collect()
}

/// Likelihoods shared by every trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModels {
    pub skew_laplace: SkewLaplaceParams,
    pub asym_cauchy: AsymCauchyParams,
    pub gmm: GmmParams,
}

impl FittedModels {
    pub fn fit(samples: &[f64], gmm_components: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            skew_laplace: fit_skew_laplace(samples)?.params,
            asym_cauchy: fit_asym_cauchy(samples)?.params,
            gmm: fit_gmm_em(samples, gmm_components, seed)?.params,
        })
    }

    pub fn model_for(&self, estimator: &str) -> Option<NoiseModel> {
        match estimator {
            MAP_C => Some(NoiseModel::AsymCauchy(self.asym_cauchy)),
            MAP_GMM => Some(NoiseModel::Gmm(self.gmm.clone())),
            ESGVI => Some(NoiseModel::SkewLaplace(self.skew_laplace)),
            _ => None,
        }
    }
}

/// Convergence facts of one solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub estimator: String,
    pub trial: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Largest increase of the objective over an accepted step.
    pub max_accepted_increase: f64,
    pub clamps: usize,
}

impl SolverDiagnostics {
    fn from_trace(estimator: &str, trial: usize, converged: bool, initial: f64, trace: &[TraceRecord]) -> Self {
        let mut prev = initial;
        let mut worst = f64::NEG_INFINITY;
        for r in trace.iter().filter(|r| r.accepted) {
            worst = worst.max(r.loss - prev);
            prev = r.loss;
        }
        Self {
            estimator: estimator.into(),
            trial,
            iterations: trace.len(),
            converged,
            max_accepted_increase: worst,
            clamps: trace.iter().map(|r| r.clamps).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub estimator: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct TrialOutcome {
    pub results: Vec<TrialResult>,
    pub diagnostics: Vec<SolverDiagnostics>,
    pub failures: Vec<TrialFailure>,
}

#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub models: FittedModels,
    pub results: Vec<TrialResult>,
    pub diagnostics: Vec<SolverDiagnostics>,
    pub failures: Vec<TrialFailure>,
}

/// Chain graph for a simulated run, with `model` on the range factors.
pub fn trial_graph(cfg: &SimConfig, sim: &SimOutput, model: NoiseModel) -> Result<FactorGraph<Pose2>> {
    let (graph, times) = build_graph(
        &sim.odometry,
        &sim.ranges,
        &cfg.anchor_points(),
        &cfg.tag_offsets(),
        cfg.prior_mean(),
        &cfg.prior_covariance(),
        model,
        &cfg.layout(),
    )?;
    if times.len() != sim.truth.len() {
        return Err(Error::LengthMismatch(times.len(), sim.truth.len()));
    }
    Ok(graph)
}

/// Simulates trial `trial` and runs all three estimators on it. MAP-C
/// starts from dead reckoning and, when warm starting, seeds ESGVI.
pub fn run_trial(
    cfg: &SimConfig,
    models: &FittedModels,
    map: &MapConfig,
    solver: &SolverConfig,
    trial: usize,
) -> Result<TrialOutcome> {
    let seed = stream_rng(cfg.seed, trial as u64 + 1).random();
    let sim = simulate_trajectory(cfg, seed)?;
    let truth = sim.truth.poses();
    let graph = trial_graph(cfg, &sim, NoiseModel::SkewLaplace(models.skew_laplace))?;
    let init = graph.dead_reckon();
    let mut out = TrialOutcome::default();
    let fail = |out: &mut TrialOutcome, name: &str, e: Error| {
        out.failures.push(TrialFailure {
            trial,
            estimator: name.into(),
            message: e.to_string(),
        })
    };

    let mut warm = None;
    for name in [MAP_C, MAP_GMM] {
        let g = graph.with_range_model(models.model_for(name).expect("known estimator"));
        let initial = g.total_energy(&init);
        match map_solve(&g, &init, map).and_then(|est| {
            let errors = pose_errors(&est.poses, truth, cfg.side)?;
            let result = TrialResult::new(name, trial, errors, est.marginals.diag.clone())?;
            Ok((est, result))
        }) {
            Ok((est, result)) => {
                out.diagnostics
                    .push(SolverDiagnostics::from_trace(name, trial, est.converged, initial, &est.trace));
                out.results.push(result);
                if name == MAP_C {
                    warm = Some(est.poses);
                }
            }
            Err(e) => fail(&mut out, name, e),
        }
    }

    let start = match (solver.warm_start, warm) {
        (true, Some(poses)) => poses,
        _ => init,
    };
    let rules = esgvi::FactorRules::from_config(solver)?;
    match esgvi::VariationalEstimate::initialize(&graph, start, &rules).and_then(|est0| {
        let initial = est0.loss;
        let est = esgvi::solve_from(&graph, est0, solver)?;
        let errors = pose_errors(&est.poses, truth, cfg.side)?;
        let result = TrialResult::new(ESGVI, trial, errors, est.marginals.diag.clone())?;
        Ok((est, result, initial))
    }) {
        Ok((est, result, initial)) => {
            out.diagnostics
                .push(SolverDiagnostics::from_trace(ESGVI, trial, est.converged, initial, &est.trace));
            out.results.push(result);
        }
        Err(e) => fail(&mut out, ESGVI, e),
    }
    Ok(out)
}

/// Fits the likelihoods once on the pre-draw, then runs all trials in
/// parallel. Results come back in trial order whatever the thread count.
pub fn run_monte_carlo(cfg: &SimConfig, map: &MapConfig, solver: &SolverConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    map.validate()?;
    solver.validate()?;
    let models = FittedModels::fit(&residual_predraw(cfg), cfg.gmm_components, cfg.seed)?;
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            run_trial(cfg, &models, map, solver, trial).unwrap_or_else(|e| TrialOutcome {
                failures: vec![TrialFailure {
                    trial,
                    estimator: "simulation".into(),
                    message: e.to_string(),
                }],
                ..Default::default()
            })
        })
        .collect();
    let mut report = MonteCarloReport {
        models,
        results: Vec::new(),
        diagnostics: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes {
        report.results.extend(o.results);
        report.diagnostics.extend(o.diagnostics);
        report.failures.extend(o.failures);
    }
    Ok(report)
}
