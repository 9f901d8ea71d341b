//! Trajectory error metrics: RMSE per twist component, aNEES and its
//! chi-square consistency bounds, and per-estimator summaries.

use std::io::Write;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::liegroup::{LieState, Side, Twist2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// `θ`, in rad
    Rotation,
    /// `(x, y)`, in m
    Translation,
}

/// `X ⊖ X̂` per pose, in the perturbation of the estimate's covariance.
pub fn pose_errors<S: LieState>(estimates: &[S], truths: &[S], side: Side) -> Result<Vec<Twist2>> {
    if estimates.len() != truths.len() {
        return Err(Error::LengthMismatch(estimates.len(), truths.len()));
    }
    Ok(truths
        .iter()
        .zip(estimates)
        .map(|(x, e)| x.ominus(e, side))
        .collect())
}

fn squared(e: &Twist2, component: Component) -> f64 {
    match component {
        Component::Rotation => e[0] * e[0],
        Component::Translation => e[1] * e[1] + e[2] * e[2],
    }
}

/// Root mean squared norm of one component over all given errors.
pub fn rmse_of<'a>(errors: impl IntoIterator<Item = &'a Twist2>, component: Component) -> f64 {
    let (sum, n) = errors
        .into_iter()
        .fold((0.0, 0usize), |(s, n), e| (s + squared(e, component), n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub fn rmse<S: LieState>(estimates: &[S], truths: &[S], side: Side, component: Component) -> Result<f64> {
    Ok(rmse_of(&pose_errors(estimates, truths, side)?, component))
}

/// `Σ eᵀ Σ⁻¹ e` over poses.
pub fn nees_sum(errors: &[Twist2], covariances: &[Matrix3<f64>]) -> Result<f64> {
    if errors.len() != covariances.len() {
        return Err(Error::LengthMismatch(errors.len(), covariances.len()));
    }
    errors
        .iter()
        .zip(covariances)
        .enumerate()
        .map(|(k, (e, c))| {
            let chol = c
                .cholesky()
                .ok_or_else(|| Error::CovarianceNotSpd(format!("pose {k} covariance")))?;
            Ok(e.dot(&chol.solve(e)))
        })
        .sum()
}

/// `(1 / (K n_x)) Σ eᵀ Σ⁻¹ e` with `n_x = 3`.
pub fn anees(errors: &[Twist2], covariances: &[Matrix3<f64>]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Data("aNEES of an empty trajectory".into()));
    }
    Ok(nees_sum(errors, covariances)? / (3 * errors.len()) as f64)
}

/// Two-sided `confidence` interval of `χ²(K n_x) / (K n_x)`.
pub fn anees_bounds(n_poses: usize, n_x: usize, confidence: f64) -> Result<(f64, f64)> {
    if !(confidence > 0.0 && confidence < 1.0) || n_poses == 0 || n_x == 0 {
        return Err(Error::InvalidParameter(format!(
            "bounds for {n_poses} poses, n_x {n_x}, confidence {confidence}"
        )));
    }
    let dof = (n_poses * n_x) as f64;
    let chi = ChiSquared::new(dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let tail = 0.5 * (1.0 - confidence);
    Ok((chi.inverse_cdf(tail) / dof, chi.inverse_cdf(1.0 - tail) / dof))
}

/// One estimator on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub estimator: String,
    pub trial: usize,
    pub errors: Vec<Twist2>,
    pub covariances: Vec<Matrix3<f64>>,
    pub rmse_rot: f64,
    pub rmse_trans: f64,
    pub anees: f64,
}

impl TrialResult {
    pub fn new(
        estimator: impl Into<String>,
        trial: usize,
        errors: Vec<Twist2>,
        covariances: Vec<Matrix3<f64>>,
    ) -> Result<Self> {
        let anees = anees(&errors, &covariances)?;
        Ok(Self {
            estimator: estimator.into(),
            trial,
            rmse_rot: rmse_of(&errors, Component::Rotation),
            rmse_trans: rmse_of(&errors, Component::Translation),
            anees,
            errors,
            covariances,
        })
    }

    pub fn row(&self) -> SummaryRow {
        SummaryRow {
            estimator: self.estimator.clone(),
            trial: self.trial,
            rmse_rot_rad: self.rmse_rot,
            rmse_trans_m: self.rmse_trans,
            anees: self.anees,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub trial: usize,
    pub rmse_rot_rad: f64,
    pub rmse_trans_m: f64,
    pub anees: f64,
}

/// Pooled metrics of one estimator over all of its trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub estimator: String,
    pub trials: usize,
    pub rmse_rot_rad: f64,
    pub rmse_trans_m: f64,
    pub anees: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl Summary {
    pub fn get(&self, estimator: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.estimator == estimator)
    }
}

/// Per-trial rows plus, per estimator in order of first appearance, the
/// RMSE and aNEES pooled over every pose of every trial.
pub fn summarize(results: &[TrialResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::Data("no trial results to summarize".into()));
    }
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.estimator.as_str()) {
            names.push(&r.estimator);
        }
    }
    let aggregate = names
        .iter()
        .map(|name| {
            let mine: Vec<&TrialResult> = results.iter().filter(|r| r.estimator == *name).collect();
            let errors = mine.iter().flat_map(|r| r.errors.iter());
            let poses: usize = mine.iter().map(|r| r.errors.len()).sum();
            let nees: f64 = mine.iter().map(|r| r.anees * (3 * r.errors.len()) as f64).sum();
            AggregateRow {
                estimator: name.to_string(),
                trials: mine.len(),
                rmse_rot_rad: rmse_of(errors.clone(), Component::Rotation),
                rmse_trans_m: rmse_of(errors, Component::Translation),
                anees: nees / (3 * poses) as f64,
            }
        })
        .collect();
    Ok(Summary {
        rows: results.iter().map(TrialResult::row).collect(),
        aggregate,
    })
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: std::io::Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Table-style aggregate: one row per estimator, tab separated.
pub fn write_aggregate_tsv<W: Write>(out: W, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
