//! Factor graphs over a chain of states: unary Gaussian priors, Gaussian
//! process factors between neighbours, and unary range factors.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::BlockSparseInfo;
use crate::liegroup::{exp_map, log_map, LieState, Pose2, Side, Twist2};
use crate::noise::NoiseModel;

/// Time-stamped chain of states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    poses: Vec<S>,
    times: Vec<f64>,
}

impl<S: LieState> Trajectory<S> {
    pub fn new(poses: Vec<S>, times: Vec<f64>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Data("trajectory has no states".into()));
        }
        if poses.len() != times.len() {
            return Err(Error::LengthMismatch(poses.len(), times.len()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("trajectory timestamps must increase strictly".into()));
        }
        Ok(Self { poses, times })
    }

    pub fn poses(&self) -> &[S] {
        &self.poses
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn with_poses(&self, poses: Vec<S>) -> Result<Self> {
        Self::new(poses, self.times.clone())
    }
}

/// The states a factor touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Unary(usize),
    /// States `(k−1, k)`.
    Binary(usize),
}

impl Scope {
    pub fn dim(&self) -> usize {
        match self {
            Scope::Unary(_) => 3,
            Scope::Binary(_) => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor<S> {
    /// `½ eᵀ W e`, `e = X_k ⊖_r mean`. Anchors the chain at `k = 0`; on
    /// other states it acts as a direct state observation.
    Prior { k: usize, mean: S, info: Matrix3<f64> },
    /// `½ eᵀ W e`, `e = X_k ⊖_r (X_{k−1} ⊕_r increment)`, `increment = Δt·u`.
    Process {
        k: usize,
        increment: Twist2,
        info: Matrix3<f64>,
    },
    /// `φ(y − ‖a − (C o + r)‖)` with the graph's range model.
    Range {
        k: usize,
        anchor: Vector2<f64>,
        tag_offset: Vector2<f64>,
        range: f64,
    },
}

impl<S> Factor<S> {
    pub fn scope(&self) -> Scope {
        match self {
            Factor::Prior { k, .. } | Factor::Range { k, .. } => Scope::Unary(*k),
            Factor::Process { k, .. } => Scope::Binary(*k),
        }
    }
}

/// `‖a − (C_ab o + r)‖`, the distance from the body-mounted tag to the anchor.
pub fn range_predict(x: &Pose2, anchor: &Vector2<f64>, tag_offset: &Vector2<f64>) -> f64 {
    (anchor - x.transform_point(tag_offset)).norm()
}

/// `e = X_k ⊖_r (X_{k−1} ⊕_r increment)`
pub fn process_error<S: LieState>(prev: &S, cur: &S, increment: &Twist2) -> Twist2 {
    cur.ominus(&prev.oplus(increment, Side::Right), Side::Right)
}

/// `½ eᵀ Q⁻¹ e` of the process error.
pub fn process_energy<S: LieState>(prev: &S, cur: &S, increment: &Twist2, info: &Matrix3<f64>) -> f64 {
    let e = process_error(prev, cur, increment);
    0.5 * e.dot(&(info * e))
}

pub fn range_energy<S: LieState>(
    x: &S,
    range: f64,
    anchor: &Vector2<f64>,
    tag_offset: &Vector2<f64>,
    model: &NoiseModel,
) -> f64 {
    model.energy(range - range_predict(&x.to_pose(), anchor, tag_offset))
}

#[derive(Debug, Clone)]
pub struct FactorGraph<S> {
    n_states: usize,
    side: Side,
    factors: Vec<Factor<S>>,
    range_model: NoiseModel,
}

impl<S: LieState> FactorGraph<S> {
    pub fn new(n_states: usize, side: Side, range_model: NoiseModel) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::Data("graph needs at least one state".into()));
        }
        Ok(Self {
            n_states,
            side,
            factors: Vec::new(),
            range_model,
        })
    }

    pub fn add(&mut self, factor: Factor<S>) -> Result<()> {
        let (k, binary) = match factor.scope() {
            Scope::Unary(k) => (k, false),
            Scope::Binary(k) => (k, true),
        };
        if k >= self.n_states || (binary && k == 0) {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.n_states,
            });
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn factors(&self) -> &[Factor<S>] {
        &self.factors
    }

    pub fn range_model(&self) -> &NoiseModel {
        &self.range_model
    }

    /// Same graph with another range likelihood.
    pub fn with_range_model(&self, model: NoiseModel) -> Self {
        Self {
            range_model: model,
            ..self.clone()
        }
    }

    /// Same graph with another perturbation side for estimation.
    pub fn with_side(&self, side: Side) -> Self {
        Self {
            side,
            ..self.clone()
        }
    }

    pub fn count(&self, pred: impl Fn(&Factor<S>) -> bool) -> usize {
        self.factors.iter().filter(|f| pred(f)).count()
    }

    /// Factor energy on the states of its scope, in scope order.
    pub fn factor_energy(&self, factor: &Factor<S>, states: &[S]) -> f64 {
        match factor {
            Factor::Prior { mean, info, .. } => {
                let e = states[0].ominus(mean, Side::Right);
                0.5 * e.dot(&(info * e))
            }
            Factor::Process { increment, info, .. } => {
                process_energy(&states[0], &states[1], increment, info)
            }
            Factor::Range {
                anchor,
                tag_offset,
                range,
                ..
            } => range_energy(&states[0], *range, anchor, tag_offset, &self.range_model),
        }
    }

    pub fn scope_states(&self, factor: &Factor<S>, poses: &[S]) -> Vec<S> {
        match factor.scope() {
            Scope::Unary(k) => vec![poses[k]],
            Scope::Binary(k) => vec![poses[k - 1], poses[k]],
        }
    }

    pub fn total_energy(&self, poses: &[S]) -> f64 {
        self.factors
            .iter()
            .map(|f| self.factor_energy(f, &self.scope_states(f, poses)))
            .sum()
    }

    /// Propagates the first prior mean through the process increments.
    pub fn dead_reckon(&self) -> Vec<S> {
        let start = self
            .factors
            .iter()
            .find_map(|f| match f {
                Factor::Prior { k: 0, mean, .. } => Some(*mean),
                _ => None,
            })
            .unwrap_or_else(S::identity);
        let mut increments = vec![Twist2::zeros(); self.n_states];
        for f in &self.factors {
            if let Factor::Process { k, increment, .. } = f {
                increments[*k] = *increment;
            }
        }
        let mut poses = Vec::with_capacity(self.n_states);
        poses.push(start);
        for inc in increments.iter().skip(1) {
            let next = poses.last().expect("non-empty").oplus(inc, Side::Right);
            poses.push(next);
        }
        poses
    }
}

/// Scatter-adds per-factor Hessian blocks into the chain information matrix.
pub fn assemble_info<'a, I>(n_states: usize, blocks: I) -> Result<BlockSparseInfo>
where
    I: IntoIterator<Item = (Scope, &'a DMatrix<f64>)>,
{
    let mut info = BlockSparseInfo::zeros(n_states);
    for (scope, m) in blocks {
        if m.nrows() != scope.dim() || m.ncols() != scope.dim() {
            return Err(Error::DimensionMismatch {
                expected: scope.dim(),
                got: m.nrows(),
            });
        }
        match scope {
            Scope::Unary(k) => info.add_unary(k, &m.fixed_view::<3, 3>(0, 0).into_owned())?,
            Scope::Binary(k) => {
                if k == 0 || k >= n_states {
                    return Err(Error::IndexOutOfRange {
                        index: k,
                        len: n_states,
                    });
                }
                info.add_block(k - 1, k - 1, &m.fixed_view::<3, 3>(0, 0).into_owned())?;
                info.add_block(k, k, &m.fixed_view::<3, 3>(3, 3).into_owned())?;
                info.add_block(k, k - 1, &m.fixed_view::<3, 3>(3, 0).into_owned())?;
            }
        }
    }
    Ok(info)
}

/// Body-frame rate and velocity sample `(ω, v_x, v_y)`, held until the next
/// sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryRecord {
    pub t: f64,
    pub omega: f64,
    pub vx: f64,
    pub vy: f64,
}

impl OdometryRecord {
    pub fn twist(&self) -> Twist2 {
        Vector3::new(self.omega, self.vx, self.vy)
    }
}

/// Range from tag `tag` to anchor `anchor`, both as table indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeRecord {
    pub t: f64,
    pub tag: usize,
    pub anchor: usize,
    pub range: f64,
}

/// Discretization of the process model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessNoise {
    /// Continuous-time PSD of `(ω, v_x, v_y)` noise.
    pub psd: [f64; 3],
    /// Multiplier applied to the lateral-velocity PSD.
    pub lateral_inflation: f64,
}

impl ProcessNoise {
    pub fn validate(&self) -> Result<()> {
        if self.psd.iter().any(|q| !(*q > 0.0 && q.is_finite()))
            || !(self.lateral_inflation > 0.0 && self.lateral_inflation.is_finite())
        {
            return Err(Error::InvalidParameter(format!("process noise {self:?}")));
        }
        Ok(())
    }

    /// Effective `Q_c` with the lateral inflation applied.
    pub fn q_c(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            self.psd[0],
            self.psd[1],
            self.psd[2] * self.lateral_inflation,
        ))
    }

    /// `Q_k = Δt · Q_c`
    pub fn discrete(&self, dt: f64) -> Matrix3<f64> {
        self.q_c() * dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphLayout {
    /// State rate in Hz; states sit on `t₀ + k / rate`.
    pub state_rate: f64,
    pub process: ProcessNoise,
    pub side: Side,
}

/// Builds the chain graph from time-ordered odometry and ranges.
///
/// States are placed on a uniform grid starting at the first odometry
/// timestamp. Odometry is compounded between grid points into one increment.
/// Each range is attached to the state with the nearest timestamp.
#[allow(clippy::too_many_arguments)]
pub fn build_graph(
    odometry: &[OdometryRecord],
    ranges: &[RangeRecord],
    anchors: &[Vector2<f64>],
    tags: &[Vector2<f64>],
    prior_mean: Pose2,
    prior_cov: &Matrix3<f64>,
    range_model: NoiseModel,
    layout: &GraphLayout,
) -> Result<(FactorGraph<Pose2>, Vec<f64>)> {
    if odometry.is_empty() {
        return Err(Error::EmptyOdometry);
    }
    if !(layout.state_rate > 0.0 && layout.state_rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("state rate {}", layout.state_rate)));
    }
    layout.process.validate()?;
    if odometry.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::Data("odometry timestamps must increase strictly".into()));
    }
    let period = 1.0 / layout.state_rate;
    let t0 = odometry[0].t;
    // the last sample is held for the median sample spacing
    let hold = if odometry.len() > 1 {
        let mut gaps: Vec<f64> = odometry.windows(2).map(|w| w[1].t - w[0].t).collect();
        gaps.sort_by(f64::total_cmp);
        gaps[gaps.len() / 2]
    } else {
        period
    };
    let t_end = odometry[odometry.len() - 1].t + hold;
    let n_steps = ((t_end - t0) / period + 1e-6).floor() as usize;
    let times: Vec<f64> = (0..=n_steps).map(|k| t0 + k as f64 * period).collect();

    let prior_info = prior_cov
        .try_inverse()
        .filter(|m| m.cholesky().is_some())
        .ok_or_else(|| Error::CovarianceNotSpd("prior covariance".into()))?;
    let process_info = layout
        .process
        .discrete(period)
        .try_inverse()
        .expect("diagonal with positive entries");

    let mut graph = FactorGraph::new(times.len(), layout.side, range_model)?;
    graph.add(Factor::Prior {
        k: 0,
        mean: prior_mean,
        info: prior_info,
    })?;

    let mut seg = 0;
    for k in 1..times.len() {
        let (a, b) = (times[k - 1], times[k]);
        let mut acc = Pose2::identity();
        while seg < odometry.len() {
            let s0 = odometry[seg].t;
            let s1 = odometry.get(seg + 1).map_or(t_end, |r| r.t);
            let lo = s0.max(a);
            let hi = s1.min(b);
            if hi > lo {
                acc = acc.compose(&exp_map(&(odometry[seg].twist() * (hi - lo))));
            }
            if s1 <= b + 1e-12 {
                seg += 1;
            } else {
                break;
            }
        }
        graph.add(Factor::Process {
            k,
            increment: log_map(&acc),
            info: process_info,
        })?;
    }

    for r in ranges {
        if r.t < t0 - 0.5 * period {
            return Err(Error::RangeBeforeFirstPose(r.t));
        }
        let anchor = *anchors.get(r.anchor).ok_or(Error::IndexOutOfRange {
            index: r.anchor,
            len: anchors.len(),
        })?;
        let tag_offset = *tags.get(r.tag).ok_or(Error::IndexOutOfRange {
            index: r.tag,
            len: tags.len(),
        })?;
        let k = (((r.t - t0) / period).round().max(0.0) as usize).min(n_steps);
        graph.add(Factor::Range {
            k,
            anchor,
            tag_offset,
            range: r.range,
        })?;
    }
    Ok((graph, times))
}
