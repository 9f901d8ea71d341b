//! Sigma-point rules for standard-normal expectations and their group
//! versions over MLG Gaussians `X = X̄ ⊕ δξ`, `δξ ~ N(0, Σ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{LieState, Side};

/// Largest dimension accepted by the tensor Gauss–Hermite rule (3⁸ points).
pub const MAX_TENSOR_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Third-order Gauss–Hermite tensor rule, `3ⁿ` points.
    #[default]
    GaussHermite3,
    /// Third-degree spherical rule, `2n` points at `±√n eᵢ`.
    Spherical,
}

/// Unit sigma points (columns of `points`) and weights for `N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubatureRule {
    points: DMatrix<f64>,
    weights: Vec<f64>,
}

impl CubatureRule {
    pub fn new(kind: RuleKind, dim: usize) -> Result<Self> {
        match kind {
            RuleKind::GaussHermite3 => gauss_hermite_rule(dim),
            RuleKind::Spherical => spherical_rule(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Tensor product of the 1-D rule `{−√3, 0, √3}` with weights `{1/6, 2/3, 1/6}`.
pub fn gauss_hermite_rule(dim: usize) -> Result<CubatureRule> {
    if dim == 0 {
        return Err(Error::InvalidParameter("cubature dimension must be ≥ 1".into()));
    }
    if dim > MAX_TENSOR_DIM {
        return Err(Error::DimensionTooLarge(dim));
    }
    let nodes = [-(3f64.sqrt()), 0.0, 3f64.sqrt()];
    let node_weights = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
    let n = 3usize.pow(dim as u32);
    let mut points = DMatrix::zeros(dim, n);
    let mut weights = Vec::with_capacity(n);
    for l in 0..n {
        let mut idx = l;
        let mut w = 1.0;
        // first axis varies slowest
        for axis in (0..dim).rev() {
            let d = idx % 3;
            idx /= 3;
            points[(axis, l)] = nodes[d];
            w *= node_weights[d];
        }
        weights.push(w);
    }
    Ok(CubatureRule { points, weights })
}

pub fn spherical_rule(dim: usize) -> Result<CubatureRule> {
    if dim == 0 {
        return Err(Error::InvalidParameter("cubature dimension must be ≥ 1".into()));
    }
    let r = (dim as f64).sqrt();
    let mut points = DMatrix::zeros(dim, 2 * dim);
    for i in 0..dim {
        points[(i, 2 * i)] = r;
        points[(i, 2 * i + 1)] = -r;
    }
    Ok(CubatureRule {
        points,
        weights: vec![0.5 / dim as f64; 2 * dim],
    })
}

/// Joint MLG Gaussian over one or more states. The covariance is over the
/// stacked perturbations `(δξ₀, δξ₁, …)` in twist ordering.
#[derive(Debug, Clone)]
pub struct MlgGaussian<S> {
    means: Vec<S>,
    covariance: DMatrix<f64>,
    sqrt_cov: DMatrix<f64>,
    side: Side,
}

impl<S: LieState> MlgGaussian<S> {
    pub fn new(means: Vec<S>, covariance: DMatrix<f64>, side: Side) -> Result<Self> {
        let dim = 3 * means.len();
        if means.is_empty() || covariance.nrows() != dim || covariance.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: covariance.nrows(),
            });
        }
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::CovarianceNotSpd("covariance is not symmetric".into()));
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let sqrt_cov = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::CovarianceNotSpd("Cholesky factorization failed".into()))?
            .unpack();
        Ok(Self {
            means,
            covariance,
            sqrt_cov,
            side,
        })
    }

    pub fn single(mean: S, covariance: nalgebra::Matrix3<f64>, side: Side) -> Result<Self> {
        Self::new(
            vec![mean],
            DMatrix::from_iterator(3, 3, covariance.iter().copied()),
            side,
        )
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn means(&self) -> &[S] {
        &self.means
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower Cholesky factor `L`, `Σ = L Lᵀ`.
    pub fn sqrt_covariance(&self) -> &DMatrix<f64> {
        &self.sqrt_cov
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn check_side(&self, side: Side) -> Result<()> {
        if side != self.side {
            return Err(Error::SideMismatch {
                expected: side,
                got: self.side,
            });
        }
        Ok(())
    }
}

/// A group sigma point: its weight, the perturbation `δξ = L α`, and the
/// perturbed states `X̄ᵢ ⊕ δξᵢ`.
#[derive(Debug, Clone)]
pub struct SigmaPoint<S> {
    pub weight: f64,
    pub perturbation: DVector<f64>,
    pub states: Vec<S>,
}

pub fn group_sigma_points<S: LieState>(
    q: &MlgGaussian<S>,
    rule: &CubatureRule,
) -> Result<Vec<SigmaPoint<S>>> {
    if rule.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            got: rule.dim(),
        });
    }
    let deltas = &q.sqrt_cov * &rule.points;
    Ok(rule
        .weights
        .iter()
        .enumerate()
        .map(|(l, &weight)| {
            let perturbation = deltas.column(l).into_owned();
            let states = q
                .means
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let d = perturbation.fixed_rows::<3>(3 * i).into_owned();
                    m.oplus(&d, q.side)
                })
                .collect();
            SigmaPoint {
                weight,
                perturbation,
                states,
            }
        })
        .collect())
}

/// `E[f]`, `E[δξ f]` and `E[δξ δξᵀ f]` from one evaluation of `f` per point.
///
/// The deviation `X ⊖ X̄` is taken as the drawn perturbation `δξ`, which is
/// what it equals whenever the rotational part stays inside (−π, π].
#[derive(Debug, Clone)]
pub struct Moments {
    pub scalar: f64,
    pub vector: DVector<f64>,
    pub matrix: DMatrix<f64>,
}

pub fn expect_moments<S, F>(q: &MlgGaussian<S>, rule: &CubatureRule, f: F) -> Result<Moments>
where
    S: LieState,
    F: Fn(&[S]) -> f64,
{
    let n = q.dim();
    let mut m = Moments {
        scalar: 0.0,
        vector: DVector::zeros(n),
        matrix: DMatrix::zeros(n, n),
    };
    for p in group_sigma_points(q, rule)? {
        let wf = p.weight * f(&p.states);
        m.scalar += wf;
        m.vector.axpy(wf, &p.perturbation, 1.0);
        m.matrix.ger(wf, &p.perturbation, &p.perturbation, 1.0);
    }
    Ok(m)
}

pub fn expect_scalar<S, F>(q: &MlgGaussian<S>, rule: &CubatureRule, f: F) -> Result<f64>
where
    S: LieState,
    F: Fn(&[S]) -> f64,
{
    Ok(group_sigma_points(q, rule)?
        .iter()
        .map(|p| p.weight * f(&p.states))
        .sum())
}

/// `E[(X ⊖ X̄) f(X)]`
pub fn expect_vector<S, F>(q: &MlgGaussian<S>, rule: &CubatureRule, f: F) -> Result<DVector<f64>>
where
    S: LieState,
    F: Fn(&[S]) -> f64,
{
    Ok(expect_moments(q, rule, f)?.vector)
}

/// `E[(X ⊖ X̄)(X ⊖ X̄)ᵀ f(X)]`
pub fn expect_matrix<S, F>(q: &MlgGaussian<S>, rule: &CubatureRule, f: F) -> Result<DMatrix<f64>>
where
    S: LieState,
    F: Fn(&[S]) -> f64,
{
    Ok(expect_moments(q, rule, f)?.matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{exp_map, Pose2, Vec3State};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, SymmetricEigen, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// `E[zᵏ]` for a standard normal: `(k−1)!!` for even `k`.
    fn normal_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|j| j as f64).product()
        }
    }

    fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.02
    }

    #[test]
    fn one_dimensional_rule_matches_golub_welsch() {
        // Jacobi matrix of the probabilists' Hermite recurrence
        let s2 = 2f64.sqrt();
        let jacobi = Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, s2, 0.0, s2, 0.0);
        let eig = SymmetricEigen::new(jacobi);
        let mut oracle: Vec<(f64, f64)> = (0..3)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0));
        let rule = gauss_hermite_rule(1).unwrap();
        for (l, (x, w)) in oracle.iter().enumerate() {
            assert_relative_eq!(rule.points()[(0, l)], *x, epsilon = 1e-14);
            assert_relative_eq!(rule.weights()[l], *w, epsilon = 1e-14);
        }
    }

    #[test]
    fn tensor_rule_structure() {
        let rule = gauss_hermite_rule(3).unwrap();
        assert_eq!(rule.len(), 27);
        assert!((rule.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(matches!(gauss_hermite_rule(9), Err(Error::DimensionTooLarge(9))));
        assert!(gauss_hermite_rule(0).is_err());
        assert_eq!(gauss_hermite_rule(6).unwrap().len(), 729);
        let sph = spherical_rule(6).unwrap();
        assert_eq!(sph.len(), 12);
        assert!((sph.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rules_are_symmetric_under_negation() {
        for rule in [gauss_hermite_rule(3).unwrap(), spherical_rule(4).unwrap()] {
            for l in 0..rule.len() {
                let neg = -rule.points().column(l);
                let found = (0..rule.len()).any(|m| {
                    (rule.points().column(m) - &neg).amax() == 0.0 && rule.weights()[m] == rule.weights()[l]
                });
                assert!(found);
            }
        }
    }

    fn rule_monomial(rule: &CubatureRule, powers: &[u32]) -> f64 {
        (0..rule.len())
            .map(|l| {
                rule.weights()[l]
                    * powers
                        .iter()
                        .enumerate()
                        .map(|(i, &k)| rule.points()[(i, l)].powi(k as i32))
                        .product::<f64>()
            })
            .sum()
    }

    fn all_powers(dim: usize, max_total: u32) -> Vec<Vec<u32>> {
        let mut out = vec![vec![]];
        for _ in 0..dim {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..=max_total).map(move |k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                })
                .filter(|p| p.iter().sum::<u32>() <= max_total)
                .collect();
        }
        out
    }

    #[test]
    fn gauss_hermite_exact_to_degree_three() {
        for dim in 1..=3 {
            let rule = gauss_hermite_rule(dim).unwrap();
            for powers in all_powers(dim, 3) {
                let exact: f64 = powers.iter().map(|&k| normal_moment(k)).product();
                assert!((rule_monomial(&rule, &powers) - exact).abs() < 1e-12, "{powers:?}");
            }
            // per-axis exactness extends to degree five
            for k in 0..=5 {
                let mut p = vec![0; dim];
                p[dim - 1] = k;
                assert!((rule_monomial(&rule, &p) - normal_moment(k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spherical_exact_to_degree_three() {
        for dim in 1..=4 {
            let rule = spherical_rule(dim).unwrap();
            for powers in all_powers(dim, 3) {
                let exact: f64 = powers.iter().map(|&k| normal_moment(k)).product();
                assert!((rule_monomial(&rule, &powers) - exact).abs() < 1e-12, "{powers:?}");
            }
        }
    }

    #[test]
    fn tiny_covariance_collapses_points() {
        let mean = Pose2::from_triple(0.4, 1.0, -2.0);
        let q = MlgGaussian::single(mean, Matrix3::identity() * 1e-16, Side::Right).unwrap();
        for p in group_sigma_points(&q, &gauss_hermite_rule(3).unwrap()).unwrap() {
            assert!((p.states[0].matrix() - mean.matrix()).amax() < 1e-7);
        }
    }

    #[test]
    fn unit_covariance_points_at_identity() {
        let q = MlgGaussian::single(Pose2::identity(), Matrix3::identity(), Side::Left).unwrap();
        let rule = spherical_rule(3).unwrap();
        for p in group_sigma_points(&q, &rule).unwrap() {
            let xi = Vector3::from_iterator(p.perturbation.iter().copied());
            assert!((p.states[0].matrix() - exp_map(&xi).matrix()).amax() < 1e-15);
        }
    }

    #[test]
    fn deviations_average_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for side in [Side::Right, Side::Left] {
            let mean = Pose2::from_triple(2.0, 3.0, -1.0);
            let cov = spd(&mut rng, 3);
            let q = MlgGaussian::new(vec![mean], cov, side).unwrap();
            let mut acc = Vector3::zeros();
            for p in group_sigma_points(&q, &gauss_hermite_rule(3).unwrap()).unwrap() {
                let d = p.states[0].ominus(&mean, side);
                assert!((d - p.perturbation.fixed_rows::<3>(0)).amax() < 1e-12);
                acc += p.weight * d;
            }
            assert!(acc.amax() < 1e-12);
        }
    }

    #[test]
    fn quadratic_form_expectation_is_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mean = Pose2::from_triple(-0.7, 0.5, 4.0);
        let cov = spd(&mut rng, 3);
        let a = {
            let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            &m + m.transpose()
        };
        for side in [Side::Right, Side::Left] {
            let q = MlgGaussian::new(vec![mean], cov.clone(), side).unwrap();
            let f = |x: &[Pose2]| {
                let e = DVector::from_iterator(3, x[0].ominus(&mean, side).iter().copied());
                (e.transpose() * &a * &e)[(0, 0)]
            };
            let value = expect_scalar(&q, &gauss_hermite_rule(3).unwrap(), f).unwrap();
            assert_relative_eq!(value, (&a * &cov).trace(), epsilon = 1e-10);

            // Monte Carlo oracle
            let l = q.sqrt_covariance().clone();
            let n = 200_000;
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for _ in 0..n {
                let z = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
                let d = &l * z;
                let x = mean.oplus(&Vector3::new(d[0], d[1], d[2]), side);
                let v = f(&[x]);
                acc += v;
                acc2 += v * v;
            }
            let mc = acc / n as f64;
            let se = ((acc2 / n as f64 - mc * mc) / n as f64).sqrt();
            assert!((mc - value).abs() < 5.0 * se, "{mc} vs {value}");
        }
    }

    #[test]
    fn constant_function_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cov = spd(&mut rng, 6);
        let q = MlgGaussian::new(
            vec![Pose2::from_triple(0.1, 1.0, 1.0), Pose2::from_triple(0.3, 1.5, 1.2)],
            cov.clone(),
            Side::Right,
        )
        .unwrap();
        for rule in [gauss_hermite_rule(6).unwrap(), spherical_rule(6).unwrap()] {
            assert_relative_eq!(expect_scalar(&q, &rule, |_| 2.5).unwrap(), 2.5, epsilon = 1e-13);
            assert!(expect_vector(&q, &rule, |_| 2.5).unwrap().amax() < 1e-13);
            let m = expect_matrix(&q, &rule, |_| 1.0).unwrap();
            assert!((m - &cov).amax() < 1e-10);
        }
    }

    #[test]
    fn stein_identity_on_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cov = spd(&mut rng, 3);
        let cov_inv = cov.clone().try_inverse().unwrap();
        let mean = Vec3State(Vector3::new(0.2, -1.0, 3.0));
        let a = {
            let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            &m + m.transpose()
        };
        let b = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let f = |x: &[Vec3State]| {
            let d = DVector::from_iterator(3, (x[0].0 - mean.0).iter().copied());
            0.5 * (d.transpose() * &a * &d)[(0, 0)] + b.dot(&d) + 0.7
        };
        let q = MlgGaussian::new(vec![mean], cov, Side::Right).unwrap();
        let m = expect_moments(&q, &gauss_hermite_rule(3).unwrap(), f).unwrap();
        // E[∇f] = b and E[∇²f] = A at the mean
        let grad = &cov_inv * &m.vector;
        let hess = -&cov_inv * m.scalar + &cov_inv * &m.matrix * &cov_inv;
        assert!((grad - &b).amax() < 1e-6);
        assert!((hess - &a).amax() < 1e-6);
    }

    #[test]
    fn sides_disagree_off_identity() {
        let mean = Pose2::from_triple(1.2, 3.0, -2.0);
        let cov = Matrix3::from_diagonal(&Vector3::new(0.05, 0.2, 0.1));
        let rule = gauss_hermite_rule(3).unwrap();
        let f = |x: &[Pose2]| x[0].translation().x;
        let r = expect_scalar(&MlgGaussian::single(mean, cov, Side::Right).unwrap(), &rule, f).unwrap();
        let l = expect_scalar(&MlgGaussian::single(mean, cov, Side::Left).unwrap(), &rule, f).unwrap();
        assert!((r - l).abs() > 1e-3);
        let q = MlgGaussian::single(mean, cov, Side::Left).unwrap();
        assert!(matches!(q.check_side(Side::Right), Err(Error::SideMismatch { .. })));
    }

    #[test]
    fn rejects_bad_covariances() {
        let m = Pose2::identity();
        assert!(matches!(
            MlgGaussian::single(m, -Matrix3::identity(), Side::Right),
            Err(Error::CovarianceNotSpd(_))
        ));
        let mut asym = Matrix3::identity();
        asym[(0, 1)] = 0.1;
        assert!(MlgGaussian::single(m, asym, Side::Right).is_err());
        assert!(MlgGaussian::new(vec![m], DMatrix::identity(6, 6), Side::Right).is_err());
        let q = MlgGaussian::single(m, Matrix3::identity(), Side::Right).unwrap();
        assert!(group_sigma_points(&q, &gauss_hermite_rule(2).unwrap()).is_err());
    }
}
