//! SO(2)/SE(2) elements, the se(2) hat/vee maps, exponential and logarithm,
//! and the right/left `⊕`/`⊖` operators.
//!
//! Tangent vectors are ordered `(θ, x, y)`: rotation first, then the two
//! translational components. Every covariance in the crate follows this
//! ordering.
//!
//! Right operators: `X ⊕ ξ = X·exp(ξ^)`, `Y ⊖ X = log(X⁻¹Y)ᵛ`.
//! Left operators:  `X ⊕ ξ = exp(ξ^)·X`, `Y ⊖ X = log(YX⁻¹)ᵛ`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tangent vector `(θ, x, y)`.
pub type Twist2 = Vector3<f64>;

/// Below this angle the trigonometric ratios fall back to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Rotation matrices are re-projected onto SO(2) after this many compositions.
const RENORMALIZE_EVERY: u32 = 1000;

/// Which side perturbations act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    #[default]
    Right,
    Left,
}

/// Wrap an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// `sin θ / θ`
fn sinc(theta: f64) -> f64 {
    if theta.abs() < SMALL_ANGLE {
        1.0 - theta * theta / 6.0
    } else {
        theta.sin() / theta
    }
}

/// `(1 − cos θ) / θ`, via `2 sin²(θ/2) / θ`.
fn cosc(theta: f64) -> f64 {
    if theta.abs() < SMALL_ANGLE {
        theta / 2.0 - theta.powi(3) / 24.0
    } else {
        let s = (0.5 * theta).sin();
        2.0 * s * s / theta
    }
}

/// `(1 − cos θ) / θ²`
fn cosc2(theta: f64) -> f64 {
    if theta.abs() < SMALL_ANGLE {
        0.5 - theta * theta / 24.0
    } else {
        let s = (0.5 * theta).sin();
        2.0 * s * s / (theta * theta)
    }
}

/// `(θ − sin θ) / θ²`. The direct form cancels badly well above
/// [`SMALL_ANGLE`], so the series covers `|θ| < 1e-2`.
fn sinc2(theta: f64) -> f64 {
    if theta.abs() < 1e-2 {
        let t2 = theta * theta;
        theta * (1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        (theta - theta.sin()) / (theta * theta)
    }
}

/// The 2×2 generator `[[0, −1], [1, 0]]`.
pub fn skew2() -> Matrix2<f64> {
    Matrix2::new(0.0, -1.0, 1.0, 0.0)
}

/// A planar rotation stored as a 2×2 matrix.
#[derive(Clone, Copy)]
pub struct Rot2 {
    mat: Matrix2<f64>,
    compositions: u32,
}

impl Rot2 {
    pub fn identity() -> Self {
        Self {
            mat: Matrix2::identity(),
            compositions: 0,
        }
    }

    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            mat: Matrix2::new(c, -s, s, c),
            compositions: 0,
        }
    }

    /// Accepts any matrix close to SO(2) and projects it onto the group.
    pub fn from_matrix(m: &Matrix2<f64>) -> Self {
        Self {
            mat: project_so2(m),
            compositions: 0,
        }
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.mat
    }

    /// Angle in `(−π, π]`.
    pub fn angle(&self) -> f64 {
        let a = self.mat[(1, 0)].atan2(self.mat[(0, 0)]);
        if a <= -PI {
            a + 2.0 * PI
        } else {
            a
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            mat: self.mat.transpose(),
            compositions: self.compositions,
        }
    }

    pub fn compose(&self, other: &Rot2) -> Self {
        let compositions = self.compositions + other.compositions + 1;
        let mat = self.mat * other.mat;
        if compositions >= RENORMALIZE_EVERY {
            Self {
                mat: project_so2(&mat),
                compositions: 0,
            }
        } else {
            Self { mat, compositions }
        }
    }
}

impl PartialEq for Rot2 {
    fn eq(&self, other: &Self) -> bool {
        self.mat == other.mat
    }
}

impl fmt::Debug for Rot2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rot2({:.6})", self.angle())
    }
}

/// Nearest rotation (polar projection) of a 2×2 matrix.
fn project_so2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let c = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let s = 0.5 * (m[(1, 0)] - m[(0, 1)]);
    let n = c.hypot(s);
    if n == 0.0 {
        return Matrix2::identity();
    }
    let (c, s) = (c / n, s / n);
    Matrix2::new(c, -s, s, c)
}

/// An SE(2) element: rotation `C_ab` and translation `r^{zw}_a`.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", from = "[f64; 3]")]
pub struct Pose2 {
    rotation: Rot2,
    translation: Vector2<f64>,
}

impl Pose2 {
    pub fn identity() -> Self {
        Self {
            rotation: Rot2::identity(),
            translation: Vector2::zeros(),
        }
    }

    pub fn new(rotation: Rot2, translation: Vector2<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from the canonical `(θ, x, y)` triple.
    pub fn from_triple(theta: f64, x: f64, y: f64) -> Self {
        Self::new(Rot2::from_angle(theta), Vector2::new(x, y))
    }

    /// Canonical `(θ, x, y)` wire form.
    pub fn to_triple(&self) -> [f64; 3] {
        [self.angle(), self.translation.x, self.translation.y]
    }

    pub fn rotation(&self) -> &Rot2 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector2<f64> {
        &self.translation
    }

    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Homogeneous 3×3 matrix with bottom row `(0, 0, 1)`.
    pub fn matrix(&self) -> Matrix3<f64> {
        let r = self.rotation.matrix();
        let t = &self.translation;
        Matrix3::new(
            r[(0, 0)],
            r[(0, 1)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            t.y,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = m.fixed_view::<2, 2>(0, 0).into_owned();
        Self::new(Rot2::from_matrix(&r), Vector2::new(m[(0, 2)], m[(1, 2)]))
    }

    pub fn compose(&self, other: &Pose2) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.translation + self.rotation.matrix() * other.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self {
            translation: -(rt.matrix() * self.translation),
            rotation: rt,
        }
    }

    /// Maps a body-frame point into the world frame.
    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation.matrix() * p + self.translation
    }

    /// Adjoint matrix, `X exp(ξ^) X⁻¹ = exp((Ad_X ξ)^)`.
    pub fn adjoint(&self) -> Matrix3<f64> {
        let r = self.rotation.matrix();
        let t = &self.translation;
        Matrix3::new(
            1.0,
            0.0,
            0.0,
            t.y,
            r[(0, 0)],
            r[(0, 1)],
            -t.x,
            r[(1, 0)],
            r[(1, 1)],
        )
    }
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Pose2(θ={:.6}, x={:.6}, y={:.6})",
            self.angle(),
            self.translation.x,
            self.translation.y
        )
    }
}

impl From<Pose2> for [f64; 3] {
    fn from(p: Pose2) -> Self {
        p.to_triple()
    }
}

impl From<[f64; 3]> for Pose2 {
    fn from(t: [f64; 3]) -> Self {
        Pose2::from_triple(t[0], t[1], t[2])
    }
}

/// `ξ^`: `[[0, −θ, x], [θ, 0, y], [0, 0, 0]]`.
pub fn hat(xi: &Twist2) -> Matrix3<f64> {
    Matrix3::new(0.0, -xi[0], xi[1], xi[0], 0.0, xi[2], 0.0, 0.0, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices outside se(2) (checked to 1e-12).
pub fn vee(m: &Matrix3<f64>) -> Result<Twist2> {
    const TOL: f64 = 1e-12;
    let bottom = m[(2, 0)].abs().max(m[(2, 1)].abs()).max(m[(2, 2)].abs());
    if bottom > TOL {
        return Err(Error::NotInAlgebra(format!("bottom row magnitude {bottom:e}")));
    }
    let diag = m[(0, 0)].abs().max(m[(1, 1)].abs());
    let asym = (m[(0, 1)] + m[(1, 0)]).abs();
    if diag > TOL || asym > TOL {
        return Err(Error::NotInAlgebra(
            "upper-left block is not skew-symmetric".into(),
        ));
    }
    Ok(Twist2::new(m[(1, 0)], m[(0, 2)], m[(1, 2)]))
}

/// `V(θ)`, the translational part of the left Jacobian of SO(2) acting on ρ.
fn v_matrix(theta: f64) -> Matrix2<f64> {
    let a = sinc(theta);
    let b = cosc(theta);
    Matrix2::new(a, -b, b, a)
}

fn v_inverse(theta: f64) -> Matrix2<f64> {
    let half = 0.5 * theta;
    // θ sin θ / (2 (1 − cos θ)) = (θ/2) cot(θ/2)
    let a = if theta.abs() < SMALL_ANGLE {
        1.0 - theta * theta / 12.0
    } else {
        half / half.tan()
    };
    Matrix2::new(a, half, -half, a)
}

/// Closed-form SE(2) exponential.
pub fn exp_map(xi: &Twist2) -> Pose2 {
    let theta = xi[0];
    let rho = Vector2::new(xi[1], xi[2]);
    Pose2::new(Rot2::from_angle(theta), v_matrix(theta) * rho)
}

/// SE(2) logarithm, `θ ∈ (−π, π]`.
pub fn log_map(x: &Pose2) -> Twist2 {
    let theta = x.angle();
    let rho = v_inverse(theta) * x.translation;
    Twist2::new(theta, rho.x, rho.y)
}

pub fn oplus(x: &Pose2, xi: &Twist2, side: Side) -> Pose2 {
    match side {
        Side::Right => x.compose(&exp_map(xi)),
        Side::Left => exp_map(xi).compose(x),
    }
}

pub fn ominus(y: &Pose2, x: &Pose2, side: Side) -> Twist2 {
    match side {
        Side::Right => log_map(&x.inverse().compose(y)),
        Side::Left => log_map(&y.compose(&x.inverse())),
    }
}

/// Right Jacobian of SE(2): `exp(ξ + δ) ≈ exp(ξ) exp(J_r(ξ) δ)`.
pub fn right_jacobian(xi: &Twist2) -> Matrix3<f64> {
    let (theta, r1, r2) = (xi[0], xi[1], xi[2]);
    let a = sinc(theta);
    let b = cosc(theta);
    let d = sinc2(theta);
    let e = cosc2(theta);
    Matrix3::new(
        1.0,
        0.0,
        0.0,
        r1 * d - r2 * e,
        a,
        b,
        r1 * e + r2 * d,
        -b,
        a,
    )
}

/// Left Jacobian of SE(2): `exp(ξ + δ) ≈ exp(J_l(ξ) δ) exp(ξ)`.
pub fn left_jacobian(xi: &Twist2) -> Matrix3<f64> {
    let (theta, r1, r2) = (xi[0], xi[1], xi[2]);
    let a = sinc(theta);
    let b = cosc(theta);
    let d = sinc2(theta);
    let e = cosc2(theta);
    Matrix3::new(
        1.0,
        0.0,
        0.0,
        r1 * d + r2 * e,
        a,
        -b,
        -r1 * e + r2 * d,
        b,
        a,
    )
}

/// Inverse of a Jacobian with the block form `[[1, 0], [c, A]]`, `A = [[a, ±b], [∓b, a]]`.
fn invert_jacobian(j: &Matrix3<f64>) -> Matrix3<f64> {
    let a = j.fixed_view::<2, 2>(1, 1).into_owned();
    let c = j.fixed_view::<2, 1>(1, 0).into_owned();
    let det = a.determinant();
    let a_inv = Matrix2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]) / det;
    let c_new = -(a_inv * c);
    let mut out = Matrix3::zeros();
    out[(0, 0)] = 1.0;
    out.fixed_view_mut::<2, 1>(1, 0).copy_from(&c_new);
    out.fixed_view_mut::<2, 2>(1, 1).copy_from(&a_inv);
    out
}

pub fn right_jacobian_inv(xi: &Twist2) -> Matrix3<f64> {
    invert_jacobian(&right_jacobian(xi))
}

pub fn left_jacobian_inv(xi: &Twist2) -> Matrix3<f64> {
    invert_jacobian(&left_jacobian(xi))
}

/// A state living on a 3-dimensional Lie group.
///
/// Implemented for [`Pose2`] and for [`Vec3State`], the translation group on
/// ℝ³ which turns every solver in the crate into its vector-space
/// counterpart.
pub trait LieState: Clone + Copy + fmt::Debug + Send + Sync + 'static {
    fn identity() -> Self;
    fn oplus(&self, xi: &Twist2, side: Side) -> Self;
    fn ominus(&self, other: &Self, side: Side) -> Twist2;
    fn to_pose(&self) -> Pose2;
    fn from_pose(p: &Pose2) -> Self;

    /// Jacobians of `e = self ⊖ other` with respect to `side` perturbations
    /// of `self` and of `other`.
    fn ominus_jacobians(&self, other: &Self, side: Side) -> (Matrix3<f64>, Matrix3<f64>);

    /// Jacobian of `X ⊕_r v` with respect to a `side` perturbation of `X`,
    /// expressed as a `side` perturbation of the result.
    fn increment_jacobian(v: &Twist2, side: Side) -> Matrix3<f64>;

    /// `∂p/∂δ` of the body point `p = C o + r` under a `side` perturbation.
    fn point_jacobian(&self, offset: &Vector2<f64>, side: Side) -> Matrix2x3<f64>;

    /// Maps a `side` perturbation of `self` to the equivalent right
    /// perturbation: `I` for the right side, `Ad(X⁻¹)` for the left.
    fn to_right_perturbation(&self, side: Side) -> Matrix3<f64>;
}

impl LieState for Pose2 {
    fn identity() -> Self {
        Pose2::identity()
    }

    fn oplus(&self, xi: &Twist2, side: Side) -> Self {
        oplus(self, xi, side)
    }

    fn ominus(&self, other: &Self, side: Side) -> Twist2 {
        ominus(self, other, side)
    }

    fn to_pose(&self) -> Pose2 {
        *self
    }

    fn from_pose(p: &Pose2) -> Self {
        *p
    }

    fn ominus_jacobians(&self, other: &Self, side: Side) -> (Matrix3<f64>, Matrix3<f64>) {
        let e = ominus(self, other, side);
        match side {
            Side::Right => (right_jacobian_inv(&e), -left_jacobian_inv(&e)),
            Side::Left => (left_jacobian_inv(&e), -right_jacobian_inv(&e)),
        }
    }

    fn increment_jacobian(v: &Twist2, side: Side) -> Matrix3<f64> {
        match side {
            Side::Right => exp_map(v).inverse().adjoint(),
            Side::Left => Matrix3::identity(),
        }
    }

    fn point_jacobian(&self, offset: &Vector2<f64>, side: Side) -> Matrix2x3<f64> {
        let mut j = Matrix2x3::zeros();
        match side {
            Side::Right => {
                let r = self.rotation.matrix();
                j.set_column(0, &(r * skew2() * offset));
                j.fixed_view_mut::<2, 2>(0, 1).copy_from(r);
            }
            Side::Left => {
                let p = self.transform_point(offset);
                j.set_column(0, &(skew2() * p));
                j.fixed_view_mut::<2, 2>(0, 1).copy_from(&Matrix2::identity());
            }
        }
        j
    }

    fn to_right_perturbation(&self, side: Side) -> Matrix3<f64> {
        match side {
            Side::Right => Matrix3::identity(),
            Side::Left => self.inverse().adjoint(),
        }
    }
}

/// A `(θ, x, y)` vector treated as an element of the additive group ℝ³.
///
/// Both sides coincide and `⊕`/`⊖` reduce to vector addition/subtraction.
/// Range prediction reads it as a pose with heading `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3State(pub Vector3<f64>);

impl LieState for Vec3State {
    fn identity() -> Self {
        Vec3State(Vector3::zeros())
    }

    fn oplus(&self, xi: &Twist2, _side: Side) -> Self {
        Vec3State(self.0 + xi)
    }

    fn ominus(&self, other: &Self, _side: Side) -> Twist2 {
        self.0 - other.0
    }

    fn to_pose(&self) -> Pose2 {
        Pose2::from_triple(self.0[0], self.0[1], self.0[2])
    }

    fn from_pose(p: &Pose2) -> Self {
        Vec3State(Vector3::from(p.to_triple()))
    }

    fn ominus_jacobians(&self, _other: &Self, _side: Side) -> (Matrix3<f64>, Matrix3<f64>) {
        (Matrix3::identity(), -Matrix3::identity())
    }

    fn increment_jacobian(_v: &Twist2, _side: Side) -> Matrix3<f64> {
        Matrix3::identity()
    }

    fn point_jacobian(&self, offset: &Vector2<f64>, _side: Side) -> Matrix2x3<f64> {
        let r = Rot2::from_angle(self.0[0]);
        let mut j = Matrix2x3::zeros();
        j.set_column(0, &(r.matrix() * skew2() * offset));
        j.fixed_view_mut::<2, 2>(0, 1).copy_from(&Matrix2::identity());
        j
    }

    fn to_right_perturbation(&self, _side: Side) -> Matrix3<f64> {
        Matrix3::identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Truncated power series of the matrix exponential.
    fn expm_series(a: &Matrix3<f64>, terms: usize) -> Matrix3<f64> {
        let mut out = Matrix3::identity();
        let mut term = Matrix3::identity();
        for k in 1..terms {
            term = term * a / k as f64;
            out += term;
        }
        out
    }

    fn random_twist(rng: &mut ChaCha8Rng, max_theta: f64, max_t: f64) -> Twist2 {
        Twist2::new(
            rng.random_range(-max_theta..max_theta),
            rng.random_range(-max_t..max_t),
            rng.random_range(-max_t..max_t),
        )
    }

    #[test]
    fn hat_zero_and_generator() {
        assert_eq!(hat(&Twist2::zeros()), Matrix3::zeros());
        let g = hat(&Twist2::new(1.0, 0.0, 0.0));
        assert_eq!(g[(0, 1)], -1.0);
        assert_eq!(g[(1, 0)], 1.0);
        assert_eq!(g.abs().sum(), 2.0);
        // matches the directional derivative of exp at the identity
        let h = 1e-6;
        let d = (exp_map(&Twist2::new(h, 0.0, 0.0)).matrix()
            - exp_map(&Twist2::new(-h, 0.0, 0.0)).matrix())
            / (2.0 * h);
        assert_relative_eq!(d, g, epsilon = 1e-9);
    }

    #[test]
    fn vee_rejects_non_algebra() {
        let xi = Twist2::new(0.3, 1.2, -0.5);
        assert_eq!(vee(&hat(&xi)).unwrap(), xi);
        assert_eq!(vee(&Matrix3::zeros()).unwrap(), Twist2::zeros());
        let mut m = hat(&xi);
        m[(2, 1)] = 0.1;
        assert!(matches!(vee(&m), Err(Error::NotInAlgebra(_))));
        let mut m = hat(&xi);
        m[(0, 0)] = 0.1;
        assert!(matches!(vee(&m), Err(Error::NotInAlgebra(_))));
    }

    #[test]
    fn exp_pure_translation_and_rotation() {
        let p = exp_map(&Twist2::new(0.0, 1.0, 0.0));
        assert_eq!(p.angle(), 0.0);
        assert_eq!(*p.translation(), Vector2::new(1.0, 0.0));
        let p = exp_map(&Twist2::new(PI / 2.0, 0.0, 0.0));
        assert_relative_eq!(p.angle(), PI / 2.0, epsilon = 1e-15);
        assert_eq!(*p.translation(), Vector2::zeros());
    }

    #[test]
    fn exp_matches_power_series() {
        let xi = Twist2::new(PI / 2.0, 1.0, 0.0);
        let series = expm_series(&hat(&xi), 30);
        assert_relative_eq!(exp_map(&xi).matrix(), series, epsilon = 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let xi = random_twist(&mut rng, PI, 2.0);
            if xi.norm() > PI {
                continue;
            }
            assert_relative_eq!(
                exp_map(&xi).matrix(),
                expm_series(&hat(&xi), 30),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for &theta in &[1e-7, 9.9e-7, 1.01e-6, 1e-5] {
            let xi = Twist2::new(theta, 0.7, -0.4);
            assert_relative_eq!(
                exp_map(&xi).matrix(),
                expm_series(&hat(&xi), 30),
                epsilon = 1e-13
            );
            assert_relative_eq!(log_map(&exp_map(&xi)), xi, epsilon = 1e-13);
        }
    }

    #[test]
    fn log_identity_and_round_trip() {
        assert_eq!(log_map(&Pose2::identity()), Twist2::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let xi = random_twist(&mut rng, PI - 0.1, 3.0);
            assert_relative_eq!(log_map(&exp_map(&xi)), xi, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_near_pi_inverts_series() {
        let theta = PI - 1e-3;
        let x = Pose2::from_triple(theta, 0.8, -1.3);
        let xi = log_map(&x);
        assert!(xi.iter().all(|v| v.is_finite()));
        // fixed-point refinement of the translational part against the series oracle
        let mut rho = Vector2::new(0.0, 0.0);
        for _ in 0..200 {
            let m = expm_series(&hat(&Twist2::new(theta, rho.x, rho.y)), 40);
            let t = Vector2::new(m[(0, 2)], m[(1, 2)]);
            let v = v_matrix(theta);
            rho += v.try_inverse().unwrap() * (x.translation() - t);
        }
        assert_relative_eq!(xi[0], theta, epsilon = 1e-12);
        assert_relative_eq!(Vector2::new(xi[1], xi[2]), rho, epsilon = 1e-9);
    }

    #[test]
    fn oplus_ominus_sides() {
        let x = Pose2::from_triple(0.4, 1.0, -2.0);
        let xi = Twist2::new(0.2, 0.3, 0.1);
        assert_eq!(oplus(&x, &Twist2::zeros(), Side::Right), x);
        let id = Pose2::identity();
        assert_eq!(oplus(&id, &xi, Side::Right), exp_map(&xi));
        assert_eq!(oplus(&id, &xi, Side::Left), exp_map(&xi));
        for side in [Side::Right, Side::Left] {
            assert_eq!(ominus(&x, &x, side), Twist2::zeros());
            assert_relative_eq!(ominus(&exp_map(&xi), &id, side), xi, epsilon = 1e-14);
            assert_relative_eq!(ominus(&oplus(&x, &xi, side), &x, side), xi, epsilon = 1e-12);
        }
        let y = Pose2::from_triple(-0.9, 0.5, 0.2);
        let r = ominus(&y, &x, Side::Right);
        let l = ominus(&y, &x, Side::Left);
        assert!((r - l).norm() > 1e-3);
        let a = Pose2::from_triple(0.0, 1.0, 2.0);
        let b = Pose2::from_triple(0.0, -3.0, 0.5);
        assert_relative_eq!(
            ominus(&a, &b, Side::Right),
            ominus(&a, &b, Side::Left),
            epsilon = 1e-15
        );
    }

    #[test]
    fn renormalization_keeps_rotation_orthogonal() {
        let step = Pose2::from_triple(0.123_456_789, 0.01, 0.0);
        let mut x = Pose2::identity();
        for _ in 0..10_000 {
            x = x.compose(&step);
            let r = x.rotation().matrix();
            assert!((r.transpose() * r - Matrix2::identity()).abs().max() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    fn numeric_jacobian<F: Fn(&Twist2) -> Twist2>(f: F) -> Matrix3<f64> {
        let h = 1e-6;
        let mut j = Matrix3::zeros();
        for i in 0..3 {
            let mut d = Twist2::zeros();
            d[i] = h;
            j.set_column(i, &((f(&d) - f(&-d)) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn jacobians_match_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let xi = random_twist(&mut rng, 2.5, 2.0);
            let jr = numeric_jacobian(|d| log_map(&exp_map(&xi).inverse().compose(&exp_map(&(xi + d)))));
            assert_relative_eq!(jr, right_jacobian(&xi), epsilon = 1e-6);
            let jl = numeric_jacobian(|d| log_map(&exp_map(&(xi + d)).compose(&exp_map(&xi).inverse())));
            assert_relative_eq!(jl, left_jacobian(&xi), epsilon = 1e-6);
            assert_relative_eq!(
                right_jacobian_inv(&xi) * right_jacobian(&xi),
                Matrix3::identity(),
                epsilon = 1e-12
            );
        }
        let x = Pose2::from_triple(0.7, 1.5, -0.3);
        let xi = Twist2::new(0.3, -0.2, 0.9);
        let lhs = x.compose(&exp_map(&xi)).compose(&x.inverse());
        assert_relative_eq!(
            lhs.matrix(),
            exp_map(&(x.adjoint() * xi)).matrix(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ominus_and_point_jacobians_match_numeric() {
        let y = Pose2::from_triple(0.8, 1.0, 2.0);
        let x = Pose2::from_triple(0.3, 0.4, 1.1);
        let o = Vector2::new(0.3, -0.2);
        for side in [Side::Right, Side::Left] {
            let (jy, jx) = y.ominus_jacobians(&x, side);
            let ny = numeric_jacobian(|d| ominus(&oplus(&y, d, side), &x, side));
            let nx = numeric_jacobian(|d| ominus(&y, &oplus(&x, d, side), side));
            assert_relative_eq!(jy, ny, epsilon = 1e-6);
            assert_relative_eq!(jx, nx, epsilon = 1e-6);

            let v = Twist2::new(0.2, 0.5, 0.05);
            let ji = Pose2::increment_jacobian(&v, side);
            let f0 = oplus(&x, &v, Side::Right);
            let ni = numeric_jacobian(|d| ominus(&oplus(&oplus(&x, d, side), &v, Side::Right), &f0, side));
            assert_relative_eq!(ji, ni, epsilon = 1e-6);

            let jp = y.point_jacobian(&o, side);
            let h = 1e-6;
            for i in 0..3 {
                let mut d = Twist2::zeros();
                d[i] = h;
                let col = (oplus(&y, &d, side).transform_point(&o)
                    - oplus(&y, &-d, side).transform_point(&o))
                    / (2.0 * h);
                assert_relative_eq!(jp.column(i).into_owned(), col, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn angle_and_wire_form() {
        assert_eq!(Rot2::from_angle(PI).angle(), PI);
        assert_eq!(Rot2::from_angle(-PI).angle(), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-3.0 * PI / 2.0), PI / 2.0, epsilon = 1e-12);
        let p = Pose2::from_triple(0.25, -1.5, 3.0);
        let s = serde_json::to_string(&p).unwrap();
        let triple: [f64; 3] = serde_json::from_str(&s).unwrap();
        assert_relative_eq!(triple[0], 0.25, epsilon = 1e-15);
        assert_eq!(&triple[1..], &[-1.5, 3.0]);
        let q: Pose2 = serde_json::from_str(&s).unwrap();
        assert_relative_eq!(q.matrix(), p.matrix(), epsilon = 1e-15);
    }

    #[test]
    fn left_perturbation_maps_to_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let x = exp_map(&random_twist(&mut rng, 3.0, 5.0));
            let d = random_twist(&mut rng, 0.5, 0.5);
            let left = oplus(&x, &d, Side::Left);
            let right = oplus(&x, &(x.to_right_perturbation(Side::Left) * d), Side::Right);
            assert!((left.matrix() - right.matrix()).amax() < 1e-12);
            assert_eq!(x.to_right_perturbation(Side::Right), Matrix3::identity());
        }
    }
}
