//! Scalar range-residual likelihoods, their factor energies `φ(r)`, sampling,
//! and maximum-likelihood fitting.
//!
//! Energies drop additive normalization constants where the density has a
//! simple closed form (Gaussian, Skew-Laplace, asymmetric Cauchy), so energy
//! values are only comparable within one model. The mixture energy is the
//! full negative log density.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::numeric::{integrate, nelder_mead};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Zero-mean Gaussian residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRaw", into = "GaussianRaw")]
pub struct GaussianParams {
    sigma: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRaw {
    sigma: f64,
}

impl GaussianParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gaussian sigma {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl TryFrom<GaussianRaw> for GaussianParams {
    type Error = Error;
    fn try_from(r: GaussianRaw) -> Result<Self> {
        Self::new(r.sigma)
    }
}

impl From<GaussianParams> for GaussianRaw {
    fn from(p: GaussianParams) -> Self {
        Self { sigma: p.sigma }
    }
}

/// Skew-Laplace residual density
/// `p(r) = exp(λ r / σ² − α |r| / σ) / (2σα)`, `α = √(1 + (λ/σ)²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkewLaplaceRaw", into = "SkewLaplaceRaw")]
pub struct SkewLaplaceParams {
    sigma: f64,
    lambda: f64,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkewLaplaceRaw {
    sigma: f64,
    lambda: f64,
}

impl SkewLaplaceParams {
    pub fn new(sigma: f64, lambda: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "skew-laplace sigma {sigma}, lambda {lambda}"
            )));
        }
        let kappa = lambda / sigma;
        Ok(Self {
            sigma,
            lambda,
            alpha: (1.0 + kappa * kappa).sqrt(),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Exponential decay rates of the right and left tails.
    fn rates(&self) -> (f64, f64) {
        let kappa = self.lambda / self.sigma;
        (
            (self.alpha - kappa) / self.sigma,
            (self.alpha + kappa) / self.sigma,
        )
    }

    /// `P(r ≥ 0)`
    fn right_mass(&self) -> f64 {
        (self.alpha + self.lambda / self.sigma) / (2.0 * self.alpha)
    }
}

impl TryFrom<SkewLaplaceRaw> for SkewLaplaceParams {
    type Error = Error;
    fn try_from(r: SkewLaplaceRaw) -> Result<Self> {
        Self::new(r.sigma, r.lambda)
    }
}

impl From<SkewLaplaceParams> for SkewLaplaceRaw {
    fn from(p: SkewLaplaceParams) -> Self {
        Self {
            sigma: p.sigma,
            lambda: p.lambda,
        }
    }
}

/// Two-piece Cauchy density with scale `c⁻` for negative residuals and `c⁺`
/// otherwise, normalized by `α = 2 / (π (c⁺ + c⁻))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AsymCauchyRaw", into = "AsymCauchyRaw")]
pub struct AsymCauchyParams {
    c_minus: f64,
    c_plus: f64,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AsymCauchyRaw {
    c_minus: f64,
    c_plus: f64,
}

impl AsymCauchyParams {
    pub fn new(c_minus: f64, c_plus: f64) -> Result<Self> {
        if !(c_minus > 0.0 && c_plus > 0.0 && c_minus.is_finite() && c_plus.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "asymmetric cauchy scales {c_minus}, {c_plus}"
            )));
        }
        Ok(Self {
            c_minus,
            c_plus,
            alpha: 2.0 / (PI * (c_plus + c_minus)),
        })
    }

    pub fn symmetric(c: f64) -> Result<Self> {
        Self::new(c, c)
    }

    pub fn c_minus(&self) -> f64 {
        self.c_minus
    }

    pub fn c_plus(&self) -> f64 {
        self.c_plus
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn scale_for(&self, r: f64) -> f64 {
        if r < 0.0 {
            self.c_minus
        } else {
            self.c_plus
        }
    }

    fn left_mass(&self) -> f64 {
        self.c_minus / (self.c_minus + self.c_plus)
    }
}

impl TryFrom<AsymCauchyRaw> for AsymCauchyParams {
    type Error = Error;
    fn try_from(r: AsymCauchyRaw) -> Result<Self> {
        Self::new(r.c_minus, r.c_plus)
    }
}

impl From<AsymCauchyParams> for AsymCauchyRaw {
    fn from(p: AsymCauchyParams) -> Self {
        Self {
            c_minus: p.c_minus,
            c_plus: p.c_plus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Scalar Gaussian mixture, components sorted by mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRaw", into = "GmmRaw")]
pub struct GmmParams {
    components: Vec<GmmComponent>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmRaw {
    components: Vec<GmmComponent>,
}

impl GmmParams {
    pub fn new(mut components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture has no components".into()));
        }
        for c in &components {
            if !(c.weight >= 0.0 && c.variance > 0.0 && c.mean.is_finite() && c.variance.is_finite())
            {
                return Err(Error::InvalidParameter(format!("mixture component {c:?}")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}"
            )));
        }
        if (total - 1.0).abs() > 1e-12 {
            for c in &mut components {
                c.weight /= total;
            }
        }
        components.sort_by(|a, b| a.mean.total_cmp(&b.mean));
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Per-component log densities `ln w_j + ln N(r | μ_j, Σ_j)`.
    fn log_terms(&self, r: f64) -> impl Iterator<Item = f64> + '_ {
        self.components.iter().map(move |c| {
            if c.weight == 0.0 {
                f64::NEG_INFINITY
            } else {
                let d = r - c.mean;
                c.weight.ln() - LN_SQRT_2PI - 0.5 * c.variance.ln() - 0.5 * d * d / c.variance
            }
        })
    }

    fn log_pdf(&self, r: f64) -> f64 {
        log_sum_exp(self.log_terms(r))
    }

    /// Posterior component probabilities at `r`.
    fn responsibilities(&self, r: f64) -> Vec<f64> {
        let terms: Vec<f64> = self.log_terms(r).collect();
        let total = log_sum_exp(terms.iter().copied());
        terms.iter().map(|t| (t - total).exp()).collect()
    }
}

impl TryFrom<GmmRaw> for GmmParams {
    type Error = Error;
    fn try_from(r: GmmRaw) -> Result<Self> {
        Self::new(r.components)
    }
}

impl From<GmmParams> for GmmRaw {
    fn from(p: GmmParams) -> Self {
        Self {
            components: p.components,
        }
    }
}

pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// A range-residual likelihood. Persisted as `{"type": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum NoiseModel {
    Gaussian(GaussianParams),
    SkewLaplace(SkewLaplaceParams),
    AsymCauchy(AsymCauchyParams),
    Gmm(GmmParams),
}

impl NoiseModel {
    pub fn kind(&self) -> &'static str {
        match self {
            NoiseModel::Gaussian(_) => "gaussian",
            NoiseModel::SkewLaplace(_) => "skew_laplace",
            NoiseModel::AsymCauchy(_) => "asym_cauchy",
            NoiseModel::Gmm(_) => "gmm",
        }
    }

    /// Factor energy `φ(r)`; `−ln p(r)` up to a model-specific constant.
    pub fn energy(&self, r: f64) -> f64 {
        match self {
            NoiseModel::Gaussian(p) => 0.5 * (r / p.sigma).powi(2),
            NoiseModel::SkewLaplace(p) => skew_laplace_energy(r, p),
            NoiseModel::AsymCauchy(p) => asym_cauchy_energy(r, p),
            NoiseModel::Gmm(p) => gmm_energy(r, p),
        }
    }

    pub fn ln_pdf(&self, r: f64) -> f64 {
        match self {
            NoiseModel::Gaussian(p) => -LN_SQRT_2PI - p.sigma.ln() - 0.5 * (r / p.sigma).powi(2),
            NoiseModel::SkewLaplace(p) => -(LN_2 + p.sigma.ln() + p.alpha.ln()) - skew_laplace_energy(r, p),
            NoiseModel::AsymCauchy(p) => p.alpha.ln() - asym_cauchy_energy(r, p),
            NoiseModel::Gmm(p) => p.log_pdf(r),
        }
    }

    pub fn pdf(&self, r: f64) -> f64 {
        self.ln_pdf(r).exp()
    }

    pub fn cdf(&self, r: f64) -> f64 {
        match self {
            NoiseModel::Gaussian(p) => normal_cdf(r / p.sigma),
            NoiseModel::SkewLaplace(p) => {
                let (right, left) = p.rates();
                let right_mass = p.right_mass();
                if r < 0.0 {
                    (1.0 - right_mass) * (left * r).exp()
                } else {
                    1.0 - right_mass * (-right * r).exp()
                }
            }
            NoiseModel::AsymCauchy(p) => {
                if r < 0.0 {
                    p.alpha * p.c_minus * (0.5 * PI + (r / p.c_minus).atan())
                } else {
                    p.left_mass() + p.alpha * p.c_plus * (r / p.c_plus).atan()
                }
            }
            NoiseModel::Gmm(p) => p
                .components
                .iter()
                .map(|c| c.weight * normal_cdf((r - c.mean) / c.variance.sqrt()))
                .sum(),
        }
    }

    /// Draws one residual.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            NoiseModel::Gaussian(p) => {
                let z: f64 = StandardNormal.sample(rng);
                p.sigma * z
            }
            NoiseModel::SkewLaplace(p) => {
                let (right, left) = p.rates();
                let u: f64 = rng.random();
                // 1 − U lies in (0, 1], so the log stays finite
                let e = -(1.0 - rng.random::<f64>()).ln();
                if u < p.right_mass() {
                    e / right
                } else {
                    -e / left
                }
            }
            NoiseModel::AsymCauchy(p) => {
                let u: f64 = rng.random();
                let left_mass = p.left_mass();
                if u < left_mass {
                    p.c_minus * (u / (p.alpha * p.c_minus) - 0.5 * PI).tan()
                } else {
                    p.c_plus * ((u - left_mass) / (p.alpha * p.c_plus)).tan()
                }
            }
            NoiseModel::Gmm(p) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = p.components.last().expect("non-empty mixture");
                for c in &p.components {
                    acc += c.weight;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                let z: f64 = StandardNormal.sample(rng);
                chosen.mean + chosen.variance.sqrt() * z
            }
        }
    }

    /// Draws `n` residuals from a seeded stream.
    pub fn sample_n(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    /// `dφ/dr`. At the Skew-Laplace kink the left derivative is used.
    pub fn energy_derivative(&self, r: f64) -> f64 {
        match self {
            NoiseModel::Gaussian(p) => r / (p.sigma * p.sigma),
            NoiseModel::SkewLaplace(p) => {
                let sign = if r > 0.0 { 1.0 } else { -1.0 };
                (-p.lambda / p.sigma + p.alpha * sign) / p.sigma
            }
            NoiseModel::AsymCauchy(p) => {
                let c = p.scale_for(r);
                2.0 * r / (c * c + r * r)
            }
            NoiseModel::Gmm(p) => p
                .responsibilities(r)
                .iter()
                .zip(&p.components)
                .map(|(g, c)| g * (r - c.mean) / c.variance)
                .sum(),
        }
    }

    /// Non-negative curvature used to build Gauss–Newton normal equations.
    ///
    /// Gaussian and Cauchy use the IRLS weight `φ'(r)/r`. The mixture uses
    /// the responsibility-weighted precision `Σ γ_j / Σ_j`, which drops the
    /// (possibly negative) responsibility-variance term of `φ''`. The
    /// Skew-Laplace weight `φ'(r)/r` is unbounded at the kink and is capped
    /// at `|r| ≥ σ/10`.
    pub fn gauss_newton_curvature(&self, r: f64) -> f64 {
        match self {
            NoiseModel::Gaussian(p) => 1.0 / (p.sigma * p.sigma),
            NoiseModel::SkewLaplace(p) => {
                self.energy_derivative(r).abs() / r.abs().max(0.1 * p.sigma)
            }
            NoiseModel::AsymCauchy(p) => {
                let c = p.scale_for(r);
                2.0 / (c * c + r * r)
            }
            NoiseModel::Gmm(p) => p
                .responsibilities(r)
                .iter()
                .zip(&p.components)
                .map(|(g, c)| g / c.variance)
                .sum(),
        }
    }

    /// Fisher information of the location, `E[φ'(r)²]`.
    pub fn fisher_information(&self) -> f64 {
        match self {
            NoiseModel::Gaussian(p) => 1.0 / (p.sigma * p.sigma),
            NoiseModel::SkewLaplace(p) => 1.0 / (p.sigma * p.sigma),
            NoiseModel::AsymCauchy(p) => 1.0 / (2.0 * p.c_minus * p.c_plus),
            NoiseModel::Gmm(p) => {
                let lo = p.components.iter().map(|c| c.mean - 12.0 * c.variance.sqrt()).fold(f64::INFINITY, f64::min);
                let hi = p.components.iter().map(|c| c.mean + 12.0 * c.variance.sqrt()).fold(f64::NEG_INFINITY, f64::max);
                integrate(
                    |r| self.energy_derivative(r).powi(2) * self.pdf(r),
                    lo,
                    hi,
                    1e-10,
                )
            }
        }
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&r| self.ln_pdf(r)).sum()
    }
}

/// `−(λ r / σ² − α |r| / σ)`
pub fn skew_laplace_energy(r: f64, p: &SkewLaplaceParams) -> f64 {
    -(p.lambda * r / (p.sigma * p.sigma) - p.alpha * r.abs() / p.sigma)
}

pub fn skew_laplace_pdf(r: f64, p: &SkewLaplaceParams) -> f64 {
    (-skew_laplace_energy(r, p)).exp() / (2.0 * p.sigma * p.alpha)
}

/// `ln(1 + (r/c)²)` with `c = c⁻` for `r < 0` and `c⁺` otherwise.
pub fn asym_cauchy_energy(r: f64, p: &AsymCauchyParams) -> f64 {
    (r / p.scale_for(r)).powi(2).ln_1p()
}

/// `−ln Σ_j w_j N(r | μ_j, Σ_j)`
pub fn gmm_energy(r: f64, p: &GmmParams) -> f64 {
    -p.log_pdf(r)
}

/// Fitted parameters with the sample log-likelihood at the optimum and at
/// the starting point.
#[derive(Debug, Clone)]
pub struct Fit<T> {
    pub params: T,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
}

fn check_samples(samples: &[f64], min: usize) -> Result<()> {
    if samples.len() < min {
        return Err(Error::DegenerateData(format!(
            "need at least {min} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateData("non-finite sample".into()));
    }
    Ok(())
}

fn mean_and_variance(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn median_abs(samples: &[f64]) -> f64 {
    let mut a: Vec<f64> = samples.iter().map(|s| s.abs()).collect();
    a.sort_by(f64::total_cmp);
    a[a.len() / 2]
}

/// Zero-mean Gaussian ML fit, `σ² = mean(r²)`.
pub fn fit_gaussian(samples: &[f64]) -> Result<Fit<GaussianParams>> {
    check_samples(samples, 2)?;
    let ms = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    if ms == 0.0 {
        return Err(Error::DegenerateData("all residuals are zero".into()));
    }
    let params = GaussianParams::new(ms.sqrt())?;
    let ll = NoiseModel::Gaussian(params).log_likelihood(samples);
    Ok(Fit {
        params,
        log_likelihood: ll,
        initial_log_likelihood: ll,
    })
}

/// Maximum-likelihood Skew-Laplace fit by Nelder–Mead over `(ln σ, λ)`.
///
/// Starts from the moment match `mean = 2λ`, `var − mean² = 2σ²`, falling back
/// to the median absolute residual for σ when the moment estimate is not
/// positive.
pub fn fit_skew_laplace(samples: &[f64]) -> Result<Fit<SkewLaplaceParams>> {
    check_samples(samples, 100)?;
    let (mean, var) = mean_and_variance(samples);
    if var == 0.0 {
        return Err(Error::DegenerateData("sample variance is zero".into()));
    }
    let lambda0 = 0.5 * mean;
    let sigma_sq = 0.5 * (var - mean * mean);
    let sigma0 = if sigma_sq > 0.0 {
        sigma_sq.sqrt()
    } else {
        median_abs(samples).max(var.sqrt() * 1e-3)
    };
    let nll = |x: &[f64]| -> f64 {
        match SkewLaplaceParams::new(x[0].exp(), x[1]) {
            Ok(p) => -NoiseModel::SkewLaplace(p).log_likelihood(samples),
            Err(_) => f64::INFINITY,
        }
    };
    let x0 = [sigma0.ln(), lambda0];
    let initial = -nll(&x0);
    let mut best = nelder_mead(nll, &x0, &[0.2, 0.2 * sigma0], 1e-13, 4000);
    // restart from the optimum with a fresh simplex
    let step = [0.05, 0.05 * best.x[0].exp()];
    let again = nelder_mead(nll, &best.x, &step, 1e-14, 4000);
    if again.value <= best.value {
        best = again;
    }
    let params = SkewLaplaceParams::new(best.x[0].exp(), best.x[1])?;
    Ok(Fit {
        params,
        log_likelihood: -best.value,
        initial_log_likelihood: initial,
    })
}

/// Maximum-likelihood asymmetric Cauchy fit by Nelder–Mead over `(ln c⁻, ln c⁺)`.
pub fn fit_asym_cauchy(samples: &[f64]) -> Result<Fit<AsymCauchyParams>> {
    check_samples(samples, 100)?;
    let (_, var) = mean_and_variance(samples);
    if var == 0.0 {
        return Err(Error::DegenerateData("sample variance is zero".into()));
    }
    let neg: Vec<f64> = samples.iter().copied().filter(|s| *s < 0.0).collect();
    let pos: Vec<f64> = samples.iter().copied().filter(|s| *s >= 0.0).collect();
    let floor = var.sqrt() * 1e-3;
    let c0 = |v: &[f64]| {
        if v.is_empty() {
            var.sqrt()
        } else {
            median_abs(v).max(floor)
        }
    };
    let nll = |x: &[f64]| -> f64 {
        match AsymCauchyParams::new(x[0].exp(), x[1].exp()) {
            Ok(p) => -NoiseModel::AsymCauchy(p).log_likelihood(samples),
            Err(_) => f64::INFINITY,
        }
    };
    let x0 = [c0(&neg).ln(), c0(&pos).ln()];
    let initial = -nll(&x0);
    let mut best = nelder_mead(nll, &x0, &[0.2, 0.2], 1e-13, 4000);
    let again = nelder_mead(nll, &best.x, &[0.05, 0.05], 1e-14, 4000);
    if again.value <= best.value {
        best = again;
    }
    let params = AsymCauchyParams::new(best.x[0].exp(), best.x[1].exp())?;
    Ok(Fit {
        params,
        log_likelihood: -best.value,
        initial_log_likelihood: initial,
    })
}

/// Result of an EM run, including the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: GmmParams,
    pub log_likelihood: f64,
    pub trace: Vec<f64>,
    pub restarts: usize,
}

const EM_MAX_ITER: usize = 500;
const EM_TOL: f64 = 1e-8;
const EM_MIN_VARIANCE: f64 = 1e-12;
const EM_MAX_RESTARTS: usize = 5;

/// Expectation–maximization for a scalar Gaussian mixture.
///
/// Iterates until the log-likelihood gain drops below 1e-8 or 500
/// iterations. A component whose variance collapses below 1e-12 triggers a
/// jittered restart, at most five times.
pub fn fit_gmm_em(samples: &[f64], n_components: usize, seed: u64) -> Result<GmmFit> {
    if n_components == 0 {
        return Err(Error::InvalidParameter("n_components must be ≥ 1".into()));
    }
    check_samples(samples, 10 * n_components)?;
    let (mean, var) = mean_and_variance(samples);
    if var == 0.0 {
        return Err(Error::DegenerateData("sample variance is zero".into()));
    }
    if n_components == 1 {
        let params = GmmParams::new(vec![GmmComponent {
            weight: 1.0,
            mean,
            variance: var,
        }])?;
        let ll = NoiseModel::Gmm(params.clone()).log_likelihood(samples);
        return Ok(GmmFit {
            params,
            log_likelihood: ll,
            trace: vec![ll],
            restarts: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..=EM_MAX_RESTARTS {
        let init = initial_components(samples, n_components, var, attempt, &mut rng);
        match run_em(samples, init) {
            Some((components, trace)) => {
                let params = GmmParams::new(components)?;
                return Ok(GmmFit {
                    params,
                    log_likelihood: *trace.last().expect("non-empty trace"),
                    trace,
                    restarts: attempt,
                });
            }
            None => continue,
        }
    }
    Err(Error::DegenerateData(format!(
        "mixture component collapsed after {EM_MAX_RESTARTS} restarts"
    )))
}

/// k-means++ style seeding; restarts jitter the chosen means.
fn initial_components(
    samples: &[f64],
    n: usize,
    var: f64,
    attempt: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<GmmComponent> {
    let mut means = vec![samples[rng.random_range(0..samples.len())]];
    while means.len() < n {
        let d2: Vec<f64> = samples
            .iter()
            .map(|s| means.iter().map(|m| (s - m).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = samples[samples.len() - 1];
        for (s, d) in samples.iter().zip(&d2) {
            u -= d;
            if u <= 0.0 {
                pick = *s;
                break;
            }
        }
        means.push(pick);
    }
    let jitter = 0.1 * var.sqrt() * attempt as f64;
    means
        .into_iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            GmmComponent {
                weight: 1.0 / n as f64,
                mean: m + jitter * z,
                variance: var,
            }
        })
        .collect()
}

fn run_em(samples: &[f64], mut comps: Vec<GmmComponent>) -> Option<(Vec<GmmComponent>, Vec<f64>)> {
    let n = samples.len();
    let k = comps.len();
    let mut resp = vec![0.0; n * k];
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..EM_MAX_ITER {
        // E-step, also yields the log-likelihood of the current parameters
        let mut ll = 0.0;
        let mut terms = vec![0.0; k];
        for (i, &s) in samples.iter().enumerate() {
            for (t, c) in terms.iter_mut().zip(&comps) {
                let d = s - c.mean;
                *t = if c.weight > 0.0 {
                    c.weight.ln() - LN_SQRT_2PI - 0.5 * c.variance.ln() - 0.5 * d * d / c.variance
                } else {
                    f64::NEG_INFINITY
                };
            }
            let lse = log_sum_exp(terms.iter().copied());
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (terms[j] - lse).exp();
            }
        }
        if let Some(&prev) = trace.last() {
            debug_assert!(
                ll >= prev - 1e-9 * prev.abs().max(1.0),
                "EM log-likelihood decreased: {prev} -> {ll}"
            );
            trace.push(ll);
            if ll - prev < EM_TOL {
                break;
            }
        } else {
            trace.push(ll);
        }
        // M-step
        for (j, c) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk <= 0.0 {
                return None;
            }
            let mean = (0..n).map(|i| resp[i * k + j] * samples[i]).sum::<f64>() / nk;
            let variance = (0..n)
                .map(|i| resp[i * k + j] * (samples[i] - mean).powi(2))
                .sum::<f64>()
                / nk;
            if variance < EM_MIN_VARIANCE {
                return None;
            }
            *c = GmmComponent {
                weight: nk / n as f64,
                mean,
                variance,
            };
        }
    }
    Some((comps, trace))
}

/// Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of a one-sample KS statistic.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..200 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if (j as u64) % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
