//! Maximum a posteriori estimation by Levenberg–Marquardt on the manifold,
//! with a Laplace approximation of the marginal covariances.

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{process_error, Factor, FactorGraph, Scope};
use crate::info::{BlockSparseInfo, Marginals};
use crate::liegroup::{LieState, Side, Twist2};
use crate::noise::NoiseModel;
use crate::trace::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            step_tolerance: 1e-8,
            initial_damping: 1e-4,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.step_tolerance > 0.0) || !(self.initial_damping > 0.0) {
            return Err(Error::Config(format!("invalid MAP settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MapEstimate<S> {
    pub poses: Vec<S>,
    /// Laplace marginals from the Gauss–Newton information at the optimum.
    pub marginals: Marginals,
    pub info: BlockSparseInfo,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
}

/// IRLS weight of a range residual, `φ'(r)/r` with its analytic limit at 0.
///
/// The mixture uses the responsibility-weighted precision instead, since its
/// components need not be centred at zero.
pub fn robust_weight(r: f64, model: &NoiseModel) -> f64 {
    model.gauss_newton_curvature(r)
}

/// Gradient and Gauss–Newton Hessian of one factor with respect to `side`
/// perturbations of its scope states.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub scope: Scope,
    pub energy: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn quadratic(scope: Scope, e: &Twist2, jac: &DMatrix<f64>, info: &Matrix3<f64>) -> Linearization {
    let w = DMatrix::from_iterator(3, 3, info.iter().copied());
    let ev = DVector::from_iterator(3, e.iter().copied());
    let jt_w = jac.transpose() * &w;
    Linearization {
        scope,
        energy: 0.5 * e.dot(&(info * e)),
        gradient: &jt_w * ev,
        hessian: &jt_w * jac,
    }
}

/// `∂r/∂δ` of the range residual `r = y − ‖a − p‖`.
pub fn range_jacobian<S: LieState>(
    x: &S,
    anchor: &nalgebra::Vector2<f64>,
    tag_offset: &nalgebra::Vector2<f64>,
    side: Side,
) -> RowVector3<f64> {
    let p = x.to_pose().transform_point(tag_offset);
    let d = anchor - p;
    let n = d.norm();
    if n == 0.0 {
        return RowVector3::zeros();
    }
    (d / n).transpose() * x.point_jacobian(tag_offset, side)
}

/// Linearizes a factor. Range factors use the curvature `curvature(r)` in
/// place of the exact second derivative of `φ`.
pub fn linearize<S: LieState>(
    graph: &FactorGraph<S>,
    factor: &Factor<S>,
    poses: &[S],
    curvature: impl Fn(f64) -> f64,
) -> Linearization {
    let side = graph.side();
    match factor {
        Factor::Prior { k, mean, info } => {
            let x = poses[*k];
            let e = x.ominus(mean, Side::Right);
            let (j, _) = x.ominus_jacobians(mean, Side::Right);
            quadratic(Scope::Unary(*k), &e, &to_dense(&(j * x.to_right_perturbation(side))), info)
        }
        Factor::Process { k, increment, info } => {
            let prev = poses[k - 1];
            let cur = poses[*k];
            let predicted = prev.oplus(increment, Side::Right);
            let e = process_error(&prev, &cur, increment);
            let (j_cur, j_pred) = cur.ominus_jacobians(&predicted, Side::Right);
            let j_cur = j_cur * cur.to_right_perturbation(side);
            let j_prev = j_pred * S::increment_jacobian(increment, Side::Right) * prev.to_right_perturbation(side);
            let mut jac = DMatrix::zeros(3, 6);
            jac.view_mut((0, 0), (3, 3)).copy_from(&j_prev);
            jac.view_mut((0, 3), (3, 3)).copy_from(&j_cur);
            quadratic(Scope::Binary(*k), &e, &jac, info)
        }
        Factor::Range {
            k,
            anchor,
            tag_offset,
            range,
        } => {
            let x = poses[*k];
            let model = graph.range_model();
            let r = range - crate::graph::range_predict(&x.to_pose(), anchor, tag_offset);
            let jr = range_jacobian(&x, anchor, tag_offset, side).transpose();
            let jr = DVector::from_iterator(3, jr.iter().copied());
            Linearization {
                scope: Scope::Unary(*k),
                energy: model.energy(r),
                gradient: &jr * model.energy_derivative(r),
                hessian: &jr * jr.transpose() * curvature(r),
            }
        }
    }
}

fn to_dense(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 3, m.iter().copied())
}

/// Total energy, gradient and Gauss–Newton information at `poses`.
pub fn linearize_graph<S: LieState>(
    graph: &FactorGraph<S>,
    poses: &[S],
    curvature: impl Fn(f64) -> f64 + Sync,
) -> Result<(f64, Vec<Vector3<f64>>, BlockSparseInfo)> {
    let parts: Vec<Linearization> = graph
        .factors()
        .par_iter()
        .map(|f| linearize(graph, f, poses, &curvature))
        .collect();
    let n = graph.n_states();
    let mut grad = vec![Vector3::zeros(); n];
    let mut energy = 0.0;
    for p in &parts {
        energy += p.energy;
        match p.scope {
            Scope::Unary(k) => grad[k] += p.gradient.fixed_rows::<3>(0),
            Scope::Binary(k) => {
                grad[k - 1] += p.gradient.fixed_rows::<3>(0);
                grad[k] += p.gradient.fixed_rows::<3>(3);
            }
        }
    }
    let info = crate::graph::assemble_info(n, parts.iter().map(|p| (p.scope, &p.hessian)))?;
    Ok((energy, grad, info))
}

fn retract<S: LieState>(poses: &[S], step: &[Vector3<f64>], side: Side) -> Vec<S> {
    poses.iter().zip(step).map(|(x, d)| x.oplus(d, side)).collect()
}

fn damped(info: &BlockSparseInfo, mu: f64) -> BlockSparseInfo {
    let mut out = info.clone();
    for k in 0..info.len() {
        let d = info.diag()[k].diagonal();
        // floor keeps unobserved directions invertible
        let add = Matrix3::from_diagonal(&d.map(|v| mu * v.max(1e-12)));
        out.add_unary(k, &add).expect("index in range");
    }
    out
}

/// Levenberg–Marquardt on `Σ φ`. A step is accepted when it does not
/// increase the objective; the damping then shrinks ×0.1, otherwise grows
/// ×10. Stops when the step norm drops below the tolerance.
pub fn map_solve<S: LieState>(
    graph: &FactorGraph<S>,
    init: &[S],
    config: &MapConfig,
) -> Result<MapEstimate<S>> {
    config.validate()?;
    if init.len() != graph.n_states() {
        return Err(Error::LengthMismatch(init.len(), graph.n_states()));
    }
    let side = graph.side();
    let curvature = |r: f64| robust_weight(r, graph.range_model());
    let mut poses = init.to_vec();
    let (mut cost, mut grad, mut info) = linearize_graph(graph, &poses, curvature)?;
    let mut mu = config.initial_damping;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut rejected = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let chol = damped(&info, mu).cholesky()?;
        let rhs: Vec<Vector3<f64>> = grad.iter().map(|g| -g).collect();
        let step = chol.solve(&rhs);
        let step_norm = step.iter().map(|s| s.amax()).fold(0.0, f64::max);
        if step_norm < config.step_tolerance {
            // the final step is still taken when it does not raise the objective
            let candidate = retract(&poses, &step, side);
            let accepted = graph.total_energy(&candidate) <= cost;
            if accepted {
                poses = candidate;
                (cost, _, info) = linearize_graph(graph, &poses, curvature)?;
            }
            trace.push(TraceRecord {
                iteration: iterations,
                loss: cost,
                step_norm,
                backtracks: rejected,
                clamps: 0,
                accepted,
            });
            converged = true;
            break;
        }
        let candidate = retract(&poses, &step, side);
        let new_cost = graph.total_energy(&candidate);
        let accepted = new_cost <= cost;
        if accepted {
            poses = candidate;
            (cost, grad, info) = linearize_graph(graph, &poses, curvature)?;
            mu = (mu * 0.1).max(1e-12);
        } else {
            mu = (mu * 10.0).min(1e12);
        }
        trace.push(TraceRecord {
            iteration: iterations,
            loss: cost,
            step_norm,
            backtracks: rejected,
            clamps: 0,
            accepted,
        });
        rejected = if accepted { 0 } else { rejected + 1 };
    }
    let marginals = info.cholesky()?.marginals();
    Ok(MapEstimate {
        poses,
        marginals,
        info,
        objective: cost,
        iterations,
        converged,
        trace,
    })
}
