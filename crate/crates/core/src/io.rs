//! Dataset files, experiment configuration and provenance headers.
//!
//! A dataset is a directory of CSV tables with a header row. Every file
//! written here starts with a `# config_hash=<sha256> seed=<n>` comment line,
//! which the readers skip. Floats are written in shortest round-trip decimal
//! form, so a write/read cycle is lossless.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::esgvi::{self, SolverConfig};
use crate::graph::{build_graph, FactorGraph, OdometryRecord, RangeRecord, Trajectory};
use crate::liegroup::Pose2;
use crate::map::{map_solve, MapConfig};
use crate::metrics::{pose_errors, write_aggregate_tsv, Summary, TrialResult};
use crate::noise::NoiseModel;
use crate::sim::{residual_predraw, FittedModels, SimConfig, SimOutput, ESGVI, MAP_C};
use crate::trace::TraceRecord;

pub const ANCHORS_FILE: &str = "anchors.csv";
pub const TAGS_FILE: &str = "tags.csv";
pub const ODOMETRY_FILE: &str = "odometry.csv";
pub const RANGES_FILE: &str = "ranges.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const PRIOR_FILE: &str = "prior.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const COVARIANCE_FILE: &str = "covariance.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const AGGREGATE_FILE: &str = "aggregate.tsv";

/// Config hash and master seed stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }

    /// Parses the first line of `path`, if it is a provenance header.
    pub fn read(path: &Path) -> Result<Option<Self>> {
        let text = std::fs::read_to_string(path)?;
        let Some(line) = text.lines().next() else {
            return Ok(None);
        };
        let mut hash = None;
        let mut seed = None;
        for field in line.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => {}
            }
        }
        Ok(hash.zip(seed).map(|(config_hash, seed)| Self { config_hash, seed }))
    }
}

/// Creates `path` and writes the provenance header to it.
pub fn create_with_header(path: &Path, prov: &Provenance) -> Result<BufWriter<File>> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(prov.header().as_bytes())?;
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, prov: &Provenance, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_with_header(path, prov)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Anchor or tag: world position for anchors, body-frame offset for tags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

impl Landmark {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RangeRow {
    t: f64,
    tag_id: u32,
    anchor_id: u32,
    range: f64,
}

/// Pose sample `(t, θ, x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub t: f64,
    pub theta: f64,
    pub x: f64,
    pub y: f64,
}

impl PoseRow {
    pub fn new(t: f64, pose: &Pose2) -> Self {
        let [theta, x, y]: [f64; 3] = (*pose).into();
        Self { t, theta, x, y }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::from_triple(self.theta, self.x, self.y)
    }
}

/// Upper triangle of a marginal covariance in `(θ, x, y)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub t: f64,
    pub p_tt: f64,
    pub p_tx: f64,
    pub p_ty: f64,
    pub p_xx: f64,
    pub p_xy: f64,
    pub p_yy: f64,
}

impl CovarianceRow {
    pub fn new(t: f64, p: &Matrix3<f64>) -> Self {
        Self {
            t,
            p_tt: p[(0, 0)],
            p_tx: p[(0, 1)],
            p_ty: p[(0, 2)],
            p_xx: p[(1, 1)],
            p_xy: p[(1, 2)],
            p_yy: p[(2, 2)],
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.p_tt, self.p_tx, self.p_ty, //
            self.p_tx, self.p_xx, self.p_xy, //
            self.p_ty, self.p_xy, self.p_yy,
        )
    }
}

/// Gaussian prior on the first pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prior {
    /// `(θ, x, y)`
    pub mean: [f64; 3],
    /// Row-major covariance of the `(θ, x, y)` perturbation.
    pub covariance: [[f64; 3]; 3],
}

impl Prior {
    pub fn from_sim(cfg: &SimConfig) -> Self {
        let p = cfg.prior_covariance();
        Self {
            mean: cfg.start,
            covariance: std::array::from_fn(|i| std::array::from_fn(|j| p[(i, j)])),
        }
    }

    pub fn mean_pose(&self) -> Pose2 {
        Pose2::from_triple(self.mean[0], self.mean[1], self.mean[2])
    }

    pub fn covariance_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.covariance[i][j])
    }
}

/// Sensor log in the on-disk schema. Range records index into `anchors`
/// and `tags`; the files refer to them by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub anchors: Vec<Landmark>,
    pub tags: Vec<Landmark>,
    pub odometry: Vec<OdometryRecord>,
    pub ranges: Vec<RangeRecord>,
    /// Kept as file rows so that a read/write cycle is byte-exact.
    pub truth: Option<Vec<PoseRow>>,
    pub prior: Option<Prior>,
}

fn landmarks(points: &[Vector2<f64>]) -> Vec<Landmark> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| Landmark { id: i as u32, x: p.x, y: p.y })
        .collect()
}

fn id_index(table: &[Landmark], kind: &str) -> Result<std::collections::HashMap<u32, usize>> {
    let mut map = std::collections::HashMap::new();
    for (i, l) in table.iter().enumerate() {
        if map.insert(l.id, i).is_some() {
            return Err(Error::Data(format!("duplicate {kind} id {}", l.id)));
        }
    }
    Ok(map)
}

impl Dataset {
    pub fn from_sim(cfg: &SimConfig, sim: &SimOutput) -> Self {
        Self {
            anchors: landmarks(&cfg.anchor_points()),
            tags: landmarks(&cfg.tag_offsets()),
            odometry: sim.odometry.clone(),
            ranges: sim.ranges.clone(),
            truth: Some(sim.truth.times().iter().zip(sim.truth.poses()).map(|(t, p)| PoseRow::new(*t, p)).collect()),
            prior: Some(Prior::from_sim(cfg)),
        }
    }

    pub fn anchor_points(&self) -> Vec<Vector2<f64>> {
        self.anchors.iter().map(Landmark::position).collect()
    }

    pub fn tag_offsets(&self) -> Vec<Vector2<f64>> {
        self.tags.iter().map(Landmark::position).collect()
    }

    /// Checks id uniqueness and resolution, and monotone timestamps per stream.
    pub fn validate(&self) -> Result<()> {
        id_index(&self.anchors, "anchor")?;
        id_index(&self.tags, "tag")?;
        if self.odometry.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Data("odometry timestamps must increase strictly".into()));
        }
        if self.ranges.windows(2).any(|w| !(w[1].t >= w[0].t)) {
            return Err(Error::Data("range timestamps must not decrease".into()));
        }
        if let Some(truth) = &self.truth {
            if truth.windows(2).any(|w| !(w[1].t > w[0].t)) {
                return Err(Error::Data("truth timestamps must increase strictly".into()));
            }
        }
        for r in &self.ranges {
            if r.anchor >= self.anchors.len() || r.tag >= self.tags.len() {
                return Err(Error::Data(format!("range at t = {} refers to an unknown landmark", r.t)));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path, prov: &Provenance) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join(ANCHORS_FILE), prov, &self.anchors)?;
        write_csv(&dir.join(TAGS_FILE), prov, &self.tags)?;
        write_csv(&dir.join(ODOMETRY_FILE), prov, &self.odometry)?;
        let rows: Vec<RangeRow> = self
            .ranges
            .iter()
            .map(|r| RangeRow {
                t: r.t,
                tag_id: self.tags[r.tag].id,
                anchor_id: self.anchors[r.anchor].id,
                range: r.range,
            })
            .collect();
        write_csv(&dir.join(RANGES_FILE), prov, &rows)?;
        if let Some(truth) = &self.truth {
            write_csv(&dir.join(TRUTH_FILE), prov, truth)?;
        }
        if let Some(prior) = &self.prior {
            write_json(&dir.join(PRIOR_FILE), prior)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let anchors: Vec<Landmark> = read_csv(&dir.join(ANCHORS_FILE))?;
        let tags: Vec<Landmark> = read_csv(&dir.join(TAGS_FILE))?;
        let odometry: Vec<OdometryRecord> = read_csv(&dir.join(ODOMETRY_FILE))?;
        let rows: Vec<RangeRow> = read_csv(&dir.join(RANGES_FILE))?;
        let anchor_ix = id_index(&anchors, "anchor")?;
        let tag_ix = id_index(&tags, "tag")?;
        let ranges = rows
            .iter()
            .map(|r| {
                let anchor = *anchor_ix
                    .get(&r.anchor_id)
                    .ok_or_else(|| Error::Data(format!("range at t = {} refers to unknown anchor id {}", r.t, r.anchor_id)))?;
                let tag = *tag_ix
                    .get(&r.tag_id)
                    .ok_or_else(|| Error::Data(format!("range at t = {} refers to unknown tag id {}", r.t, r.tag_id)))?;
                Ok(RangeRecord { t: r.t, tag, anchor, range: r.range })
            })
            .collect::<Result<Vec<_>>>()?;
        let truth_path = dir.join(TRUTH_FILE);
        let truth = truth_path.exists().then(|| read_csv(&truth_path)).transpose()?;
        let prior_path = dir.join(PRIOR_FILE);
        let prior = prior_path.exists().then(|| read_json(&prior_path)).transpose()?;
        let ds = Self { anchors, tags, odometry, ranges, truth, prior };
        ds.validate()?;
        Ok(ds)
    }

    pub fn truth_trajectory(&self) -> Result<Option<Trajectory<Pose2>>> {
        self.truth
            .as_ref()
            .map(|rows| Trajectory::new(rows.iter().map(PoseRow::pose).collect(), rows.iter().map(|r| r.t).collect()))
            .transpose()
    }

    /// Chain graph with `model` on the range factors. The dataset's own prior
    /// wins over `fallback`.
    pub fn graph(&self, cfg: &SimConfig, fallback: &Prior, model: NoiseModel) -> Result<(FactorGraph<Pose2>, Vec<f64>)> {
        let prior = self.prior.as_ref().unwrap_or(fallback);
        build_graph(
            &self.odometry,
            &self.ranges,
            &self.anchor_points(),
            &self.tag_offsets(),
            prior.mean_pose(),
            &prior.covariance_matrix(),
            model,
            &cfg.layout(),
        )
    }
}

pub fn write_trajectory(path: &Path, prov: &Provenance, traj: &Trajectory<Pose2>) -> Result<()> {
    let rows: Vec<PoseRow> = traj.times().iter().zip(traj.poses()).map(|(t, p)| PoseRow::new(*t, p)).collect();
    write_csv(path, prov, &rows)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory<Pose2>> {
    let rows: Vec<PoseRow> = read_csv(path)?;
    Trajectory::new(rows.iter().map(PoseRow::pose).collect(), rows.iter().map(|r| r.t).collect())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Solver output as written by `estimate`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOutput {
    pub trajectory: Trajectory<Pose2>,
    pub covariances: Vec<Matrix3<f64>>,
    pub trace: Vec<TraceRecord>,
}

impl EstimateOutput {
    pub fn write(&self, dir: &Path, prov: &Provenance) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_trajectory(&dir.join(TRAJECTORY_FILE), prov, &self.trajectory)?;
        let rows: Vec<CovarianceRow> = self
            .trajectory
            .times()
            .iter()
            .zip(&self.covariances)
            .map(|(t, p)| CovarianceRow::new(*t, p))
            .collect();
        write_csv(&dir.join(COVARIANCE_FILE), prov, &rows)?;
        write_csv(&dir.join(TRACE_FILE), prov, &self.trace)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let trajectory = read_trajectory(&dir.join(TRAJECTORY_FILE))?;
        let rows: Vec<CovarianceRow> = read_csv(&dir.join(COVARIANCE_FILE))?;
        if rows.len() != trajectory.len() || rows.iter().zip(trajectory.times()).any(|(r, t)| r.t != *t) {
            return Err(Error::Data("covariance rows do not match the trajectory timestamps".into()));
        }
        let trace_path = dir.join(TRACE_FILE);
        let trace = if trace_path.exists() { read_csv(&trace_path)? } else { Vec::new() };
        Ok(Self {
            trajectory,
            covariances: rows.iter().map(CovarianceRow::matrix).collect(),
            trace,
        })
    }
}

/// Index of the nearest truth sample for every estimate time; each must
/// lie within `tolerance`.
pub fn align(estimate_times: &[f64], truth_times: &[f64], tolerance: f64) -> Result<Vec<usize>> {
    if truth_times.is_empty() {
        return Err(Error::Data("truth has no samples".into()));
    }
    estimate_times
        .iter()
        .map(|&t| {
            let i = truth_times.partition_point(|&s| s < t);
            let best = [i.saturating_sub(1), i.min(truth_times.len() - 1)]
                .into_iter()
                .min_by(|&a, &b| (truth_times[a] - t).abs().total_cmp(&(truth_times[b] - t).abs()))
                .expect("two candidates");
            let gap = (truth_times[best] - t).abs();
            if gap > tolerance {
                return Err(Error::Data(format!(
                    "estimate at t = {t} s has no truth sample within {tolerance} s (nearest is {gap} s away)"
                )));
            }
            Ok(best)
        })
        .collect()
}

/// Everything a command needs besides its file arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub map: MapConfig,
    pub solver: SolverConfig,
    /// Pre-fitted likelihoods (a [`FittedModels`] JSON). When absent they are
    /// fitted on the simulated residual pre-draw.
    pub noise_models: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            map: MapConfig::default(),
            solver: SolverConfig::default(),
            noise_models: None,
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; schema errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.map.validate()?;
        self.solver.validate()
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let content = Self {
            output: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&content).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.sim.seed,
        }
    }

    /// Loaded from `noise_models` or fitted on the pre-draw.
    pub fn models(&self) -> Result<FittedModels> {
        match &self.noise_models {
            Some(path) => read_json(path),
            None => FittedModels::fit(&residual_predraw(&self.sim), self.sim.gmm_components, self.sim.seed),
        }
    }

    /// Half the state period.
    pub fn alignment_tolerance(&self) -> f64 {
        0.5 / self.sim.state_rate
    }
}

/// Runs `method` (`map-c`, `map-gmm` or `esgvi`) on a dataset. With
/// `warm_start`, ESGVI starts from the MAP-C optimum instead of dead
/// reckoning.
pub fn estimate_dataset(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    models: &FittedModels,
    method: &str,
    warm_start: bool,
) -> Result<EstimateOutput> {
    let model = models
        .model_for(method)
        .ok_or_else(|| Error::Config(format!("unknown method {method:?}; expected map-c, map-gmm or esgvi")))?;
    let fallback = Prior::from_sim(&cfg.sim);
    let (graph, times) = ds.graph(&cfg.sim, &fallback, model)?;
    let init = graph.dead_reckon();
    let (poses, covariances, trace) = if method == ESGVI {
        let start = if warm_start {
            let map_c = models.model_for(MAP_C).expect("known estimator");
            map_solve(&graph.with_range_model(map_c), &init, &cfg.map)?.poses
        } else {
            init
        };
        let est = esgvi::solve(&graph, &start, &cfg.solver)?;
        (est.poses, est.marginals.diag, est.trace)
    } else {
        let est = map_solve(&graph, &init, &cfg.map)?;
        (est.poses, est.marginals.diag, est.trace)
    };
    Ok(EstimateOutput {
        trajectory: Trajectory::new(poses, times)?,
        covariances,
        trace,
    })
}

/// Metrics of an estimate against truth, matching each estimate time to the
/// nearest truth sample within half a state period.
pub fn evaluate_estimate(
    cfg: &ExperimentConfig,
    estimate: &EstimateOutput,
    truth: &Trajectory<Pose2>,
    label: &str,
) -> Result<TrialResult> {
    let ix = align(estimate.trajectory.times(), truth.times(), cfg.alignment_tolerance())?;
    let matched: Vec<Pose2> = ix.iter().map(|&i| truth.poses()[i]).collect();
    let errors = pose_errors(estimate.trajectory.poses(), &matched, cfg.sim.side)?;
    TrialResult::new(label, 0, errors, estimate.covariances.clone())
}

/// Writes `summary.csv` and `aggregate.tsv` under `dir`.
pub fn write_summary(dir: &Path, prov: &Provenance, summary: &Summary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join(SUMMARY_FILE), prov, &summary.rows)?;
    let mut out = create_with_header(&dir.join(AGGREGATE_FILE), prov)?;
    write_aggregate_tsv(&mut out, &summary.aggregate)?;
    out.flush()?;
    Ok(())
}

/// One residual per row, column `residual`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub residual: f64,
}

pub fn write_residuals(path: &Path, prov: &Provenance, residuals: &[f64]) -> Result<()> {
    let rows: Vec<ResidualRow> = residuals.iter().map(|&residual| ResidualRow { residual }).collect();
    write_csv(path, prov, &rows)
}

pub fn read_residuals(path: &Path) -> Result<Vec<f64>> {
    Ok(read_csv::<ResidualRow>(path)?.into_iter().map(|r| r.residual).collect())
}

/// Output of `fit-noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFitReport {
    pub model: NoiseModel,
    pub log_likelihood: f64,
    pub samples: usize,
}
