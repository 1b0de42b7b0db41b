//! Offset least squares and its rank-one (Sherman–Morrison) augmentation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::basis::{regularized_cholesky, DesignMatrix};
use crate::error::{Error, Result};
use crate::loss::LossSpec;

pub const DEFAULT_RIDGE: f64 = 1e-10;
pub const LS_TOLERANCE: f64 = 1e-8;
/// Smallest acceptable `1 + phi^T A^-1 phi`.
pub const MIN_SM_DENOMINATOR: f64 = 1e-12;

/// Coefficients of the offset `g(x) = phi(x)^T beta` added to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetFit {
    pub beta: Vec<f64>,
    pub loss: LossSpec,
    /// Largest absolute first-order violation (least squares) or the
    /// sup-norm distance from zero to the subdifferential (pinball).
    pub optimality_gap: f64,
    pub ridge: f64,
    pub iterations: usize,
    /// `Phi^T r` of the fitted problem, kept for rank-one updates.
    #[serde(skip)]
    pub(crate) normal_rhs: Vec<f64>,
}

impl OffsetFit {
    pub fn offset_at(&self, phi: &[f64]) -> f64 {
        dot(phi, &self.beta)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_residuals(residuals: &[f64], design: &DesignMatrix) -> Result<()> {
    if residuals.len() != design.nrows() {
        return Err(Error::invalid(format!(
            "{} residuals for {} design rows",
            residuals.len(),
            design.nrows()
        )));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("non-finite residual"));
    }
    Ok(())
}

/// `max_j |sum_i b_j(x_i) (r_i - phi_i^T beta)|`.
pub fn first_order_gap(design: &DesignMatrix, residuals: &[f64], beta: &[f64]) -> f64 {
    let fitted = design.times(beta);
    let e: Vec<f64> = residuals.iter().zip(&fitted).map(|(r, f)| r - f).collect();
    design.transpose_times(&e).amax()
}

/// `beta = (Phi^T Phi + ridge I)^-1 Phi^T r`, refined once.
pub fn fit_offset_ls(residuals: &[f64], design: &DesignMatrix, ridge: f64) -> Result<OffsetFit> {
    check_residuals(residuals, design)?;
    let chol = regularized_cholesky(design.gram(), ridge)?;
    let m = design.ncols();
    let a = design.gram() + nalgebra::DMatrix::identity(m, m) * ridge;
    let b = design.transpose_times(residuals);
    let mut beta = chol.solve(&b);
    let correction = chol.solve(&(&b - &a * &beta));
    beta += correction;
    let beta: Vec<f64> = beta.iter().copied().collect();
    Ok(OffsetFit {
        optimality_gap: first_order_gap(design, residuals, &beta),
        beta,
        loss: LossSpec::SquaredError,
        ridge,
        iterations: 1,
        normal_rhs: b.iter().copied().collect(),
    })
}

/// Exact least-squares fit on the design augmented by one row, from the
/// cached Gram inverse of the original design. `fit` must be the fit of
/// that design with the same ridge.
pub fn sm_augment(
    fit: &OffsetFit,
    design: &DesignMatrix,
    new_row: &[f64],
    new_residual: f64,
) -> Result<OffsetFit> {
    let (ridge, inv) = design
        .gram_inverse()
        .ok_or_else(|| Error::invalid("design has no cached Gram inverse"))?;
    if ridge != fit.ridge {
        return Err(Error::invalid(format!(
            "fit ridge {} differs from cached ridge {ridge}",
            fit.ridge
        )));
    }
    if new_row.len() != design.ncols() || fit.beta.len() != design.ncols() {
        return Err(Error::invalid("augmenting row has the wrong dimension"));
    }
    if !new_residual.is_finite() || new_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite augmenting row"));
    }
    let phi = DVector::from_column_slice(new_row);
    let h = inv * &phi;
    let denom = 1.0 + phi.dot(&h);
    if denom <= MIN_SM_DENOMINATOR {
        return Err(Error::DegenerateUpdate { denominator: denom });
    }
    let innovation = new_residual - dot(new_row, &fit.beta);
    let beta: Vec<f64> = fit
        .beta
        .iter()
        .zip(h.iter())
        .map(|(b, hj)| b + hj * innovation / denom)
        .collect();

    let rhs: Vec<f64> = if fit.normal_rhs.len() == beta.len() {
        fit.normal_rhs
            .iter()
            .zip(new_row)
            .map(|(b, p)| b + p * new_residual)
            .collect()
    } else {
        Vec::new()
    };
    let gap = if rhs.is_empty() {
        f64::NAN
    } else {
        let beta_v = DVector::from_column_slice(&beta);
        let lhs = design.gram() * &beta_v + &phi * phi.dot(&beta_v);
        (DVector::from_column_slice(&rhs) - lhs).amax()
    };
    Ok(OffsetFit {
        beta,
        loss: LossSpec::SquaredError,
        optimality_gap: gap,
        ridge,
        iterations: fit.iterations,
        normal_rhs: rhs,
    })
}

/// Augmented-fit prediction at the augmenting row itself, as an affine
/// function of the imputed residual: `offset(r) = base + lever * (r - base)`
/// with `base = phi^T beta` and `lever = h / (1 + h)`, `h = phi^T A^-1 phi`.
#[derive(Debug, Clone, Copy)]
pub struct SelfInfluence {
    pub base: f64,
    pub lever: f64,
}

impl SelfInfluence {
    pub fn new(fit: &OffsetFit, design: &DesignMatrix, phi: &[f64]) -> Result<Self> {
        let (_, inv) = design
            .gram_inverse()
            .ok_or_else(|| Error::invalid("design has no cached Gram inverse"))?;
        let p = DVector::from_column_slice(phi);
        let h = p.dot(&(inv * &p));
        let denom = 1.0 + h;
        if denom <= MIN_SM_DENOMINATOR {
            return Err(Error::DegenerateUpdate { denominator: denom });
        }
        Ok(Self {
            base: fit.offset_at(phi),
            lever: h / denom,
        })
    }

    pub fn offset(&self, residual: f64) -> f64 {
        self.base + self.lever * (residual - self.base)
    }
}
