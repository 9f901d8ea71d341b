//! Exactly sparse Gaussian variational inference on MLG states.
//!
//! Each iteration evaluates every factor's Stein-form gradient and Hessian
//! blocks by group cubature over its marginal, solves the block-tridiagonal
//! system for the mean update, backtracks on the loss `V(q)` and retracts
//! the means.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cubature::{group_sigma_points, CubatureRule, MlgGaussian, RuleKind};
use crate::error::{Error, Result};
use crate::graph::{assemble_info, Factor, FactorGraph, Scope};
use crate::info::{BlockSparseInfo, Marginals};
use crate::liegroup::{LieState, Side};
use crate::map::linearize_graph;
use crate::trace::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop once `‖δμ‖∞` falls below this.
    pub step_tolerance: f64,
    /// Stop once `|ΔV| / max(|V|, 1)` falls below this.
    pub relative_loss_tolerance: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    pub unary_rule: RuleKind,
    pub binary_rule: RuleKind,
    /// Floor for the eigenvalues of each factor's Hessian block.
    pub eigen_floor: f64,
    /// Start from the MAP-C solution instead of dead reckoning.
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            step_tolerance: 1e-6,
            relative_loss_tolerance: 1e-9,
            shrink: 0.5,
            max_backtracks: 20,
            unary_rule: RuleKind::GaussHermite3,
            binary_rule: RuleKind::GaussHermite3,
            eigen_floor: 1e-9,
            warm_start: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.step_tolerance > 0.0
            && self.relative_loss_tolerance > 0.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.eigen_floor > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid ESGVI settings {self:?}")));
        }
        Ok(())
    }
}

/// Sigma-point rules for unary (3-D) and binary (6-D) factor marginals.
#[derive(Debug, Clone)]
pub struct FactorRules {
    pub unary: CubatureRule,
    pub binary: CubatureRule,
}

impl FactorRules {
    pub fn new(unary: RuleKind, binary: RuleKind) -> Result<Self> {
        Ok(Self {
            unary: CubatureRule::new(unary, 3)?,
            binary: CubatureRule::new(binary, 6)?,
        })
    }

    pub fn from_config(config: &SolverConfig) -> Result<Self> {
        Self::new(config.unary_rule, config.binary_rule)
    }

    pub fn for_scope(&self, scope: Scope) -> &CubatureRule {
        match scope {
            Scope::Unary(_) => &self.unary,
            Scope::Binary(_) => &self.binary,
        }
    }
}

impl Default for FactorRules {
    fn default() -> Self {
        Self::new(RuleKind::GaussHermite3, RuleKind::GaussHermite3).expect("fixed dimensions")
    }
}

/// Gaussian `q` over the trajectory: means, the information matrix and its
/// tridiagonal covariance band, all in `side` perturbations.
#[derive(Debug, Clone)]
pub struct VariationalEstimate<S> {
    pub poses: Vec<S>,
    pub marginals: Marginals,
    pub info: BlockSparseInfo,
    pub side: Side,
    /// `V(q)` under the rules it was last evaluated with.
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
}

impl<S: LieState> VariationalEstimate<S> {
    /// Estimate with the given means and information, its loss evaluated.
    pub fn new(
        graph: &FactorGraph<S>,
        poses: Vec<S>,
        info: BlockSparseInfo,
        rules: &FactorRules,
    ) -> Result<Self> {
        if poses.len() != graph.n_states() {
            return Err(Error::LengthMismatch(poses.len(), graph.n_states()));
        }
        if info.len() != graph.n_states() {
            return Err(Error::LengthMismatch(info.len(), graph.n_states()));
        }
        let chol = info.cholesky()?;
        let marginals = chol.marginals();
        let loss = expected_energy(graph, &poses, &marginals, rules)? + 0.5 * chol.log_det();
        Ok(Self {
            poses,
            marginals,
            info,
            side: graph.side(),
            loss,
            iterations: 0,
            converged: false,
            trace: Vec::new(),
        })
    }

    /// Means `poses` with the Gauss–Newton information at them, range
    /// factors weighted by the likelihood's Fisher information.
    pub fn initialize(graph: &FactorGraph<S>, poses: Vec<S>, rules: &FactorRules) -> Result<Self> {
        if poses.len() != graph.n_states() {
            return Err(Error::LengthMismatch(poses.len(), graph.n_states()));
        }
        let fisher = graph.range_model().fisher_information();
        let (_, _, info) = linearize_graph(graph, &poses, |_| fisher)?;
        Self::new(graph, poses, info, rules)
    }

    /// Marginal `q` over the states of `scope`.
    pub fn marginal(&self, scope: Scope) -> Result<MlgGaussian<S>> {
        factor_marginal(&self.poses, &self.marginals, scope, self.side)
    }
}

/// `E[φ]` with the Stein-form gradient `Σ⁻¹ E[δξ φ]` and Hessian
/// `Σ⁻¹ E[δξ δξᵀ φ] Σ⁻¹ − Σ⁻¹ E[φ]` of one factor.
#[derive(Debug, Clone)]
pub struct FactorBlocks {
    pub scope: Scope,
    pub expected_energy: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// Eigenvalues of the raw Hessian below `−floor` that were lifted.
    pub clamps: usize,
}

/// Stein-form blocks from `φ` evaluations at the group sigma points only,
/// with the Hessian symmetrized and its eigenvalues floored at `eigen_floor`.
pub fn factor_blocks<S: LieState>(
    graph: &FactorGraph<S>,
    factor: &Factor<S>,
    q: &MlgGaussian<S>,
    rule: &CubatureRule,
    eigen_floor: f64,
) -> Result<FactorBlocks> {
    let raw = stein_blocks(graph, factor, q, rule)?;
    let (hessian, clamps) = floor_eigenvalues(&raw.hessian, eigen_floor);
    Ok(FactorBlocks { hessian, clamps, ..raw })
}

/// Unconditioned Stein-form blocks. With `δξ = L α` they are `L⁻ᵀ E[α φ]`
/// and `L⁻ᵀ (E[α αᵀ φ] − E[φ] I) L⁻¹`. `φ` is centred at its value at the
/// mean, which leaves both unchanged for rules that integrate `α` and
/// `α αᵀ` exactly.
pub fn stein_blocks<S: LieState>(
    graph: &FactorGraph<S>,
    factor: &Factor<S>,
    q: &MlgGaussian<S>,
    rule: &CubatureRule,
) -> Result<FactorBlocks> {
    q.check_side(graph.side())?;
    let n = q.dim();
    if n != factor.scope().dim() {
        return Err(Error::DimensionMismatch {
            expected: factor.scope().dim(),
            got: n,
        });
    }
    let centre = graph.factor_energy(factor, q.means());
    let mut mean = 0.0;
    let mut first = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    for (l, p) in group_sigma_points(q, rule)?.iter().enumerate() {
        let f = graph.factor_energy(factor, &p.states) - centre;
        let alpha = rule.points().column(l);
        mean += p.weight * f;
        first.axpy(p.weight * f, &alpha, 1.0);
        second.ger(p.weight * f, &alpha, &alpha, 1.0);
    }
    for i in 0..n {
        second[(i, i)] -= mean;
    }
    let lt = q.sqrt_covariance().transpose();
    let singular = || Error::CovarianceNotSpd("singular square root".into());
    let gradient = lt.solve_upper_triangular(&first).ok_or_else(singular)?;
    // L⁻ᵀ M L⁻¹ = L⁻ᵀ (L⁻ᵀ Mᵀ)ᵀ
    let half = lt.solve_upper_triangular(&second.transpose()).ok_or_else(singular)?;
    let hessian = lt.solve_upper_triangular(&half.transpose()).ok_or_else(singular)?;
    Ok(FactorBlocks {
        scope: factor.scope(),
        expected_energy: mean + centre,
        gradient,
        hessian,
        clamps: 0,
    })
}

/// Symmetric part of `m` with eigenvalues below `floor` raised to it. Counts
/// the eigenvalues that were below `−floor`, i.e. genuinely indefinite.
fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, usize) {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let mut clamps = 0;
    for v in eig.eigenvalues.iter_mut() {
        if *v < -floor {
            clamps += 1;
        }
        if *v < floor {
            *v = floor;
        }
    }
    let h = eig.recompose();
    ((&h + h.transpose()) * 0.5, clamps)
}

fn factor_marginal<S: LieState>(
    poses: &[S],
    marginals: &Marginals,
    scope: Scope,
    side: Side,
) -> Result<MlgGaussian<S>> {
    match scope {
        Scope::Unary(k) => MlgGaussian::single(poses[k], marginals.diag[k], side),
        Scope::Binary(k) => {
            let joint = marginals.joint(k);
            MlgGaussian::new(
                vec![poses[k - 1], poses[k]],
                DMatrix::from_iterator(6, 6, joint.iter().copied()),
                side,
            )
        }
    }
}

/// `Σ_k E_{q_k}[φ_k]` for means `poses` and covariance band `marginals`.
pub fn expected_energy<S: LieState>(
    graph: &FactorGraph<S>,
    poses: &[S],
    marginals: &Marginals,
    rules: &FactorRules,
) -> Result<f64> {
    let side = graph.side();
    let parts: Result<Vec<f64>> = graph
        .factors()
        .par_iter()
        .map(|f| {
            let scope = f.scope();
            let q = factor_marginal(poses, marginals, scope, side)?;
            let rule = rules.for_scope(scope);
            Ok(group_sigma_points(&q, rule)?
                .iter()
                .map(|p| p.weight * graph.factor_energy(f, &p.states))
                .sum())
        })
        .collect();
    Ok(parts?.iter().sum())
}

/// `V(q) = Σ_k E_{q_k}[φ_k] + ½ ln |Σ⁻¹|`
pub fn loss_functional<S: LieState>(
    graph: &FactorGraph<S>,
    estimate: &VariationalEstimate<S>,
    rules: &FactorRules,
) -> Result<f64> {
    if estimate.side != graph.side() {
        return Err(Error::SideMismatch {
            expected: graph.side(),
            got: estimate.side,
        });
    }
    let chol = estimate.info.cholesky()?;
    Ok(expected_energy(graph, &estimate.poses, &chol.marginals(), rules)? + 0.5 * chol.log_det())
}

fn retract<S: LieState>(poses: &[S], step: &[Vector3<f64>], scale: f64, side: Side) -> Vec<S> {
    poses
        .iter()
        .zip(step)
        .map(|(x, d)| x.oplus(&(d * scale), side))
        .collect()
}

/// One iteration, with `accepted == false` when no trial step lowered `V`.
fn iterate_inner<S: LieState>(
    graph: &FactorGraph<S>,
    est: &VariationalEstimate<S>,
    config: &SolverConfig,
    rules: &FactorRules,
) -> Result<(VariationalEstimate<S>, TraceRecord, f64)> {
    if est.side != graph.side() {
        return Err(Error::SideMismatch {
            expected: graph.side(),
            got: est.side,
        });
    }
    let side = est.side;
    let blocks: Vec<FactorBlocks> = graph
        .factors()
        .par_iter()
        .map(|f| {
            let scope = f.scope();
            let q = est.marginal(scope)?;
            factor_blocks(graph, f, &q, rules.for_scope(scope), config.eigen_floor)
        })
        .collect::<Result<_>>()?;

    let n = graph.n_states();
    let mut grad = vec![Vector3::zeros(); n];
    let mut clamps = 0;
    for b in &blocks {
        clamps += b.clamps;
        match b.scope {
            Scope::Unary(k) => grad[k] += b.gradient.fixed_rows::<3>(0),
            Scope::Binary(k) => {
                grad[k - 1] += b.gradient.fixed_rows::<3>(0);
                grad[k] += b.gradient.fixed_rows::<3>(3);
            }
        }
    }
    let info = assemble_info(n, blocks.iter().map(|b| (b.scope, &b.hessian)))?;
    let chol = info.cholesky()?;
    let rhs: Vec<Vector3<f64>> = grad.iter().map(|g| -g).collect();
    let step = chol.solve(&rhs);
    let step_norm = step.iter().map(|s| s.amax()).fold(0.0, f64::max);
    let marginals = chol.marginals();
    let half_log_det = 0.5 * chol.log_det();

    // Full step with the new covariance first. If that fails and the new
    // covariance alone does not lower V either, backtrack with the old one.
    let old_half_log_det = 0.5 * est.info.cholesky()?.log_det();
    let mut backtracks = 0;
    let mut best = f64::INFINITY;
    let mut evaluate = |scale: f64, m: &Marginals, half: f64| -> Result<(Vec<S>, f64)> {
        let poses = retract(&est.poses, &step, scale, side);
        let loss = expected_energy(graph, &poses, m, rules)? + half;
        best = best.min(loss);
        Ok((poses, loss))
    };
    let accept = |poses: Vec<S>, loss: f64, scale: f64, backtracks: usize, m: &Marginals, info: &BlockSparseInfo| {
        let record = TraceRecord {
            iteration: est.iterations + 1,
            loss,
            step_norm: step_norm * scale,
            backtracks,
            clamps,
            accepted: true,
        };
        let mut trace = est.trace.clone();
        trace.push(record);
        let next = VariationalEstimate {
            poses,
            marginals: m.clone(),
            info: info.clone(),
            side,
            loss,
            iterations: est.iterations + 1,
            converged: false,
            trace,
        };
        (next, record, step_norm)
    };

    let (poses, loss) = evaluate(1.0, &marginals, half_log_det)?;
    if loss <= est.loss {
        return Ok(accept(poses, loss, 1.0, 0, &marginals, &info));
    }
    backtracks += 1;
    let (still, still_loss) = evaluate(0.0, &marginals, half_log_det)?;
    if still_loss <= est.loss {
        let mut scale = 1.0;
        for _ in 1..config.max_backtracks {
            scale *= config.shrink;
            let (poses, loss) = evaluate(scale, &marginals, half_log_det)?;
            if loss <= est.loss {
                return Ok(accept(poses, loss, scale, backtracks, &marginals, &info));
            }
            backtracks += 1;
        }
        return Ok(accept(still, still_loss, 0.0, backtracks, &marginals, &info));
    }
    backtracks += 1;
    let mut scale = 1.0;
    for _ in 0..config.max_backtracks {
        let (poses, loss) = evaluate(scale, &est.marginals, old_half_log_det)?;
        if loss <= est.loss {
            return Ok(accept(poses, loss, scale, backtracks, &est.marginals, &est.info));
        }
        backtracks += 1;
        if loss - est.loss <= config.relative_loss_tolerance * est.loss.abs().max(1.0) {
            // V is flat along the step to within the loss tolerance
            break;
        }
        scale *= config.shrink;
    }
    let record = TraceRecord {
        iteration: est.iterations + 1,
        loss: est.loss,
        step_norm,
        backtracks,
        clamps,
        accepted: false,
    };
    let mut next = est.clone();
    next.iterations += 1;
    next.trace.push(record);
    Ok((next, record, best))
}

/// One ESGVI pass: factor blocks, information and gradient assembly, the
/// block-tridiagonal solve, backtracking on `V(q)` and retraction. Returns
/// the updated estimate and `‖δμ‖∞` of the full step.
pub fn esgvi_iterate<S: LieState>(
    graph: &FactorGraph<S>,
    estimate: &VariationalEstimate<S>,
    config: &SolverConfig,
    rules: &FactorRules,
) -> Result<(VariationalEstimate<S>, f64)> {
    config.validate()?;
    let (next, record, norm) = iterate_inner(graph, estimate, config, rules)?;
    if !record.accepted {
        return Err(Error::LineSearchFailed(record.backtracks));
    }
    Ok((next, norm))
}

/// Iterates from `init` until the step or the relative loss change falls
/// below tolerance. A failed line search ends the solve as converged when
/// the best trial loss is within the relative tolerance of the current one.
pub fn solve_from<S: LieState>(
    graph: &FactorGraph<S>,
    init: VariationalEstimate<S>,
    config: &SolverConfig,
) -> Result<VariationalEstimate<S>> {
    config.validate()?;
    let rules = FactorRules::from_config(config)?;
    let mut est = init;
    est.loss = loss_functional(graph, &est, &rules)?;
    while est.iterations < config.max_iterations {
        let before = est.loss;
        let (next, record, extra) = iterate_inner(graph, &est, config, &rules)?;
        let scale = before.abs().max(1.0);
        if !record.accepted {
            let best = extra;
            if record.step_norm < config.step_tolerance
                || best - before <= config.relative_loss_tolerance * scale
            {
                est = next;
                est.converged = true;
                return Ok(est);
            }
            return Err(Error::LineSearchFailed(record.backtracks));
        }
        est = next;
        let step_norm = extra;
        if step_norm < config.step_tolerance
            || (before - est.loss).abs() < config.relative_loss_tolerance * scale
        {
            est.converged = true;
            break;
        }
    }
    Ok(est)
}

/// ESGVI from means `init`, starting from the Gauss–Newton information.
pub fn solve<S: LieState>(
    graph: &FactorGraph<S>,
    init: &[S],
    config: &SolverConfig,
) -> Result<VariationalEstimate<S>> {
    config.validate()?;
    let rules = FactorRules::from_config(config)?;
    let est = VariationalEstimate::initialize(graph, init.to_vec(), &rules)?;
    solve_from(graph, est, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::range_predict;
    use crate::liegroup::{Pose2, Vec3State};
    use crate::map::{linearize, map_solve, MapConfig};
    use crate::noise::{GaussianParams, NoiseModel, SkewLaplaceParams};
    use nalgebra::{Matrix3, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(sigma: f64) -> NoiseModel {
        NoiseModel::Gaussian(GaussianParams::new(sigma).unwrap())
    }

    fn skew_laplace() -> NoiseModel {
        NoiseModel::SkewLaplace(SkewLaplaceParams::new(0.1, 0.04).unwrap())
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose() + DMatrix::identity(n, n) * 0.2) * scale
    }

    fn planar(side: Side, model: NoiseModel, n: usize, seed: u64) -> (FactorGraph<Pose2>, Vec<Pose2>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Vector3::new(0.15, 0.5, 0.0);
        let mut truth = vec![Pose2::from_triple(0.1, 1.0, 1.0)];
        for _ in 1..n {
            let next = truth.last().unwrap().oplus(&u, Side::Right);
            truth.push(next);
        }
        let anchors = [Vector2::new(0.0, 0.0), Vector2::new(6.0, 0.0), Vector2::new(6.0, 6.0), Vector2::new(0.0, 6.0)];
        let tag = Vector2::new(0.2, 0.1);
        let mut g = FactorGraph::new(n, side, model.clone()).unwrap();
        g.add(Factor::Prior { k: 0, mean: truth[0], info: Matrix3::identity() * 1e4 }).unwrap();
        for k in 1..n {
            let w: Vector3<f64> = Vector3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.05 * z
            });
            g.add(Factor::Process { k, increment: u + w, info: Matrix3::identity() * 400.0 }).unwrap();
            for a in &anchors {
                let noise = model.sample(&mut rng);
                g.add(Factor::Range { k, anchor: *a, tag_offset: tag, range: range_predict(&truth[k], a, &tag) + noise })
                    .unwrap();
            }
        }
        (g, truth)
    }

    #[test]
    fn quadratic_factors_reproduce_gauss_newton_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g: FactorGraph<Vec3State> = FactorGraph::new(2, Side::Right, gaussian(1.0)).unwrap();
        let w = Matrix3::new(4.0, 0.5, 0.1, 0.5, 2.0, -0.3, 0.1, -0.3, 1.0);
        let prior = Factor::Prior { k: 0, mean: Vec3State(Vector3::new(0.3, -1.0, 2.0)), info: w };
        let process = Factor::Process { k: 1, increment: Vector3::new(0.5, 0.2, -0.1), info: w * 3.0 };
        g.add(prior.clone()).unwrap();
        g.add(process.clone()).unwrap();
        let poses = vec![Vec3State(Vector3::new(0.1, 0.4, -0.2)), Vec3State(Vector3::new(1.0, 0.0, 0.5))];
        let rules = FactorRules::default();

        let q1 = MlgGaussian::new(vec![poses[0]], random_spd(&mut rng, 3, 0.3), Side::Right).unwrap();
        let b = factor_blocks(&g, &prior, &q1, &rules.unary, 1e-9).unwrap();
        let lin = linearize(&g, &prior, &poses, |_| 0.0);
        assert!((b.gradient - &lin.gradient).amax() < 1e-8);
        assert!((b.hessian - &lin.hessian).amax() < 1e-8);

        let q2 = MlgGaussian::new(poses.clone(), random_spd(&mut rng, 6, 0.3), Side::Right).unwrap();
        let b = factor_blocks(&g, &process, &q2, &rules.binary, 1e-9).unwrap();
        let lin = linearize(&g, &process, &poses, |_| 0.0);
        assert!((b.gradient - &lin.gradient).amax() < 1e-8);
        // rank-3 block: the null space is lifted to the floor
        assert!((b.hessian - &lin.hessian).amax() < 1e-8);
        assert_eq!(b.clamps, 0);
    }

    #[test]
    fn constant_energy_gives_zero_blocks() {
        // a prior with zero information is the constant φ ≡ 0
        let mut g: FactorGraph<Pose2> = FactorGraph::new(1, Side::Right, gaussian(1.0)).unwrap();
        let f = Factor::Prior { k: 0, mean: Pose2::from_triple(0.3, 1.0, 2.0), info: Matrix3::zeros() };
        g.add(f.clone()).unwrap();
        let q = MlgGaussian::single(Pose2::from_triple(1.0, -2.0, 0.5), Matrix3::identity() * 0.2, Side::Right).unwrap();
        let b = factor_blocks(&g, &f, &q, &FactorRules::default().unary, 1e-9).unwrap();
        assert_eq!(b.expected_energy, 0.0);
        assert!(b.gradient.amax() < 1e-15);
        assert!((b.hessian - DMatrix::identity(3, 3) * 1e-9).amax() < 1e-15);
    }

    /// `G(h) = E[φ(X̄ ⊕ δξ)]` with `δξ ~ N(h, Σ)`, by the same rule.
    fn shifted_expectation(g: &FactorGraph<Pose2>, f: &Factor<Pose2>, q: &MlgGaussian<Pose2>, rule: &CubatureRule, h: &Vector3<f64>) -> f64 {
        let deltas = q.sqrt_covariance() * rule.points();
        (0..rule.len())
            .map(|l| {
                let d = h + deltas.fixed_view::<3, 1>(0, l);
                rule.weights()[l] * g.factor_energy(f, &[q.means()[0].oplus(&d, q.side())])
            })
            .sum()
    }

    #[test]
    fn skew_laplace_blocks_match_finite_differences() {
        for side in [Side::Right, Side::Left] {
            let mut g: FactorGraph<Pose2> = FactorGraph::new(1, side, skew_laplace()).unwrap();
            let x = Pose2::from_triple(0.4, 1.0, 2.0);
            let anchor = Vector2::new(8.0, -3.0);
            let tag = Vector2::new(0.3, 0.1);
            let f = Factor::Range { k: 0, anchor, tag_offset: tag, range: range_predict(&x, &anchor, &tag) + 0.3 };
            g.add(f.clone()).unwrap();
            let cov = Matrix3::new(1e-4, 2e-5, 0.0, 2e-5, 4e-4, -1e-5, 0.0, -1e-5, 3e-4) * 0.25;
            let q = MlgGaussian::single(x, cov, side).unwrap();
            let rule = FactorRules::default().unary;
            let b = stein_blocks(&g, &f, &q, &rule).unwrap();
            let h = 1e-5;
            let e = |i: usize| Vector3::ith(i, h);
            for i in 0..3 {
                let fd = (shifted_expectation(&g, &f, &q, &rule, &e(i)) - shifted_expectation(&g, &f, &q, &rule, &-e(i))) / (2.0 * h);
                assert!((b.gradient[i] - fd).abs() < 1e-4, "{side:?} gradient {i}: {} vs {fd}", b.gradient[i]);
            }
            let gg = |v: Vector3<f64>| shifted_expectation(&g, &f, &q, &rule, &v);
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (gg(e(i) + e(j)) - gg(e(i) - e(j)) - gg(e(j) - e(i)) + gg(-e(i) - e(j))) / (4.0 * h * h);
                    assert!((b.hessian[(i, j)] - fd).abs() < 1e-4 * b.hessian.amax().max(1.0), "{side:?} hessian {i}{j}: {} vs {fd}", b.hessian[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn prior_only_loss_closed_form() {
        let mut g: FactorGraph<Vec3State> = FactorGraph::new(1, Side::Right, gaussian(1.0)).unwrap();
        let w = Matrix3::new(4.0, 0.5, 0.1, 0.5, 2.0, -0.3, 0.1, -0.3, 1.0);
        let mean = Vec3State(Vector3::new(1.0, 2.0, 3.0));
        g.add(Factor::Prior { k: 0, mean, info: w }).unwrap();
        let rules = FactorRules::default();
        let mut info = BlockSparseInfo::zeros(1);
        info.add_unary(0, &w).unwrap();
        let est = VariationalEstimate::new(&g, vec![mean], info, &rules).unwrap();
        // E[½ eᵀWe] = ½ tr(W Σ) = 3/2 at q = prior
        let expected = 1.5 + 0.5 * w.determinant().ln();
        assert!((est.loss - expected).abs() < 1e-12);
        assert!((loss_functional(&g, &est, &rules).unwrap() - expected).abs() < 1e-12);

        // doubling every φ doubles the expectation term
        let mut g2: FactorGraph<Vec3State> = FactorGraph::new(1, Side::Right, gaussian(1.0)).unwrap();
        g2.add(Factor::Prior { k: 0, mean, info: w * 2.0 }).unwrap();
        let doubled = loss_functional(&g2, &est, &rules).unwrap() - 0.5 * w.determinant().ln();
        assert!((doubled - 3.0).abs() < 1e-12);
    }

    #[test]
    fn prior_at_truth_is_a_fixed_point() {
        let mut g: FactorGraph<Vec3State> = FactorGraph::new(3, Side::Right, gaussian(1.0)).unwrap();
        let u = Vector3::new(0.1, 1.0, 0.0);
        let x0 = Vec3State(Vector3::new(0.2, 1.0, 0.0));
        g.add(Factor::Prior { k: 0, mean: x0, info: Matrix3::identity() * 100.0 }).unwrap();
        for k in 1..3 {
            g.add(Factor::Process { k, increment: u, info: Matrix3::identity() * 50.0 }).unwrap();
        }
        let init = g.dead_reckon();
        let est = solve(&g, &init, &SolverConfig::default()).unwrap();
        assert!(est.converged);
        assert_eq!(est.iterations, 1);
        for (a, b) in est.poses.iter().zip(&init) {
            assert!(a.ominus(b, Side::Right).amax() < 1e-12);
        }
    }

    #[test]
    fn loss_never_increases_and_sides_agree_near_map() {
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for side in [Side::Right, Side::Left] {
            let (g, truth) = planar(side, skew_laplace(), 12, 11);
            let est = solve(&g, &g.dead_reckon(), &SolverConfig::default()).unwrap();
            assert!(est.converged, "{side:?} did not converge");
            let mut prev = f64::INFINITY;
            for r in est.trace.iter().filter(|r| r.accepted) {
                assert!(r.loss <= prev + 1e-12);
                prev = r.loss;
            }
            let err: f64 = est.poses.iter().zip(&truth).map(|(a, b)| a.ominus(b, Side::Right).norm_squared()).sum();
            let dr: f64 = g.dead_reckon().iter().zip(&truth).map(|(a, b)| a.ominus(b, Side::Right).norm_squared()).sum();
            assert!(err < dr, "{side:?}: {err} vs dead reckoning {dr}");
            stds.push(est.marginals.diag.iter().map(|c| c.diagonal().map(f64::sqrt)).collect::<Vec<_>>());
            means.push(est.poses);
        }
        // the two sides fit different Gaussian families, so their means
        // agree only to well within the posterior spread
        for (k, (a, b)) in means[0].iter().zip(&means[1]).enumerate() {
            let gap = a.ominus(b, Side::Right);
            let sd = stds[0][k];
            for i in 0..3 {
                assert!(gap[i].abs() < 0.5 * sd[i], "pose {k} axis {i}: gap {} vs sd {}", gap[i], sd[i]);
            }
        }
    }

    #[test]
    fn warm_start_needs_no_more_iterations() {
        let (g, _) = planar(Side::Right, skew_laplace(), 12, 5);
        let cfg = SolverConfig::default();
        let cold = solve(&g, &g.dead_reckon(), &cfg).unwrap();
        let cauchy = g.with_range_model(gaussian(0.1));
        let map = map_solve(&cauchy, &g.dead_reckon(), &MapConfig::default()).unwrap();
        let warm = solve(&g, &map.poses, &cfg).unwrap();
        assert!(warm.iterations <= cold.iterations, "{} vs {}", warm.iterations, cold.iterations);
    }

    #[test]
    fn side_mismatch_is_rejected() {
        let (g, _) = planar(Side::Right, gaussian(0.1), 3, 1);
        let rules = FactorRules::default();
        let est = VariationalEstimate::initialize(&g, g.dead_reckon(), &rules).unwrap();
        let left = g.with_side(Side::Left);
        assert!(matches!(loss_functional(&left, &est, &rules), Err(Error::SideMismatch { .. })));
        assert!(matches!(esgvi_iterate(&left, &est, &SolverConfig::default(), &rules), Err(Error::SideMismatch { .. })));
        assert!(matches!(solve(&g, &g.dead_reckon()[..2], &SolverConfig::default()), Err(Error::LengthMismatch(2, 3))));
    }

    #[test]
    fn config_validation_and_defaults() {
        let cfg: SolverConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, SolverConfig::default());
        assert!(serde_json::from_str::<SolverConfig>(r#"{"shrnk": 0.5}"#).is_err());
        for bad in [
            SolverConfig { shrink: 1.0, ..Default::default() },
            SolverConfig { step_tolerance: 0.0, ..Default::default() },
            SolverConfig { max_iterations: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
