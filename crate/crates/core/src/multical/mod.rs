//! Venn multicalibration over the linear span of a finite basis.
//!
//! The model `f` is corrected by an offset `g(x) = phi(x)^T beta` fit on the
//! calibration set augmented with the query and an imputed target. Squared
//! error uses a Sherman–Morrison update of one cached Gram inverse, so each
//! imputed target costs O(1) after O(m^2) setup per query; pinball losses
//! re-solve a warm-started quantile regression per imputed target.

pub mod basis;
pub mod least_squares;
pub mod quantile;

use serde::{Deserialize, Serialize};

pub use basis::{build_basis, truncated_cubic, Basis, BasisSpec, DesignMatrix, SplineTerm};
pub use least_squares::{
    first_order_gap, fit_offset_ls, sm_augment, OffsetFit, SelfInfluence, DEFAULT_RIDGE,
    LS_TOLERANCE,
};
pub use quantile::{fit_offset_quantile, quantile_objective, QuantileSolverConfig};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::venn::{ImputationGrid, VennEntry, VennSet, MONOTONE_CHECK_POINTS};
use quantile::QuantileLp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    #[default]
    FullGrid,
    /// Only the grid minimum and maximum, after a monotonicity check.
    Extremes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MulticalOptions {
    pub ridge: f64,
    pub solver: QuantileSolverConfig,
}

impl Default for MulticalOptions {
    fn default() -> Self {
        Self {
            ridge: DEFAULT_RIDGE,
            solver: QuantileSolverConfig::default(),
        }
    }
}

/// A calibration set prepared for Venn multicalibration queries.
#[derive(Debug, Clone)]
pub struct MulticalModel {
    loss: LossSpec,
    basis: Basis,
    design: DesignMatrix,
    offsets: Vec<f64>,
    targets: Vec<f64>,
    options: MulticalOptions,
    point_fit: OffsetFit,
}

/// One query: its basis row and model prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticalQuery {
    pub phi: Vec<f64>,
    pub prediction: f64,
}

impl MulticalModel {
    /// `pred_column` names the model being calibrated; `None` calibrates the
    /// zero model (useful for score quantiles). The loss targets are the
    /// outcome, or the conformity score for score losses.
    pub fn fit(
        loss: LossSpec,
        cal: &Dataset,
        pred_column: Option<&str>,
        spec: &BasisSpec,
        options: MulticalOptions,
    ) -> Result<Self> {
        let basis = Basis::fit(cal, spec)?;
        let offsets = match pred_column {
            Some(c) => cal.pred(c)?.to_vec(),
            None => vec![0.0; cal.len()],
        };
        let targets = loss.targets(cal)?;
        Self::from_parts(loss, basis, cal, offsets, targets, options)
    }

    pub fn from_parts(
        loss: LossSpec,
        basis: Basis,
        cal: &Dataset,
        offsets: Vec<f64>,
        targets: Vec<f64>,
        options: MulticalOptions,
    ) -> Result<Self> {
        loss.validate()?;
        if offsets.len() != cal.len() || targets.len() != cal.len() {
            return Err(Error::invalid(
                "offsets and targets must align with the calibration rows",
            ));
        }
        let mut design = basis.design(cal)?;
        let residuals: Vec<f64> = targets.iter().zip(&offsets).map(|(t, f)| t - f).collect();
        let point_fit = match loss.alpha() {
            None => {
                design = design.with_gram_inverse(options.ridge)?;
                fit_offset_ls(&residuals, &design, options.ridge)?
            }
            Some(alpha) => {
                let mut fit = fit_offset_quantile(&residuals, &design, alpha, &options.solver)?;
                fit.loss = loss.clone();
                fit
            }
        };
        Ok(Self {
            loss,
            basis,
            design,
            offsets,
            targets,
            options,
            point_fit,
        })
    }

    pub fn loss(&self) -> &LossSpec {
        &self.loss
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    /// Offset fit on the calibration set alone (point multicalibration).
    pub fn point_fit(&self) -> &OffsetFit {
        &self.point_fit
    }

    pub fn query(
        &self,
        data: &Dataset,
        row: usize,
        pred_column: Option<&str>,
    ) -> Result<MulticalQuery> {
        Ok(MulticalQuery {
            phi: self.basis.row(data, row)?,
            prediction: match pred_column {
                Some(c) => data.pred(c)?[row],
                None => 0.0,
            },
        })
    }

    pub fn point_prediction(&self, q: &MulticalQuery) -> f64 {
        q.prediction + self.point_fit.offset_at(&q.phi)
    }

    /// Evaluates `f(x) + g^{(x, t)}(x)` for imputed targets `t`.
    pub fn evaluator(&self, q: &MulticalQuery) -> Result<AugmentedEvaluator<'_>> {
        if q.phi.len() != self.basis.dim() || !q.prediction.is_finite() {
            return Err(Error::invalid("query row does not match the basis"));
        }
        let inner = match self.loss.alpha() {
            None => Inner::Ls(SelfInfluence::new(&self.point_fit, &self.design, &q.phi)?),
            Some(alpha) => {
                let residuals: Vec<f64> = self
                    .targets
                    .iter()
                    .zip(&self.offsets)
                    .map(|(t, f)| t - f)
                    .collect();
                let lp = QuantileLp::new(&self.design, &residuals)?.with_extra_row(&q.phi)?;
                Inner::Quantile {
                    lp: Box::new(lp),
                    alpha,
                    warm: None,
                }
            }
        };
        Ok(AugmentedEvaluator {
            model: self,
            query: q.clone(),
            inner,
        })
    }

    pub fn venn_set(
        &self,
        q: &MulticalQuery,
        grid: &ImputationGrid,
        mode: GridMode,
    ) -> Result<VennSet> {
        let mut eval = self.evaluator(q)?;
        let ys: Vec<f64> = match mode {
            GridMode::FullGrid => grid.values().to_vec(),
            GridMode::Extremes => vec![grid.min(), grid.max()],
        };
        let mut entries = Vec::with_capacity(ys.len());
        for y in ys {
            entries.push(VennEntry {
                imputed_y: y,
                prediction: eval.value(y)?,
            });
        }
        let mut set = VennSet::from_entries(q.prediction, entries);
        if mode == GridMode::Extremes {
            let (lo, hi) = (grid.min(), grid.max());
            let mut check = Vec::with_capacity(MONOTONE_CHECK_POINTS);
            for j in 0..MONOTONE_CHECK_POINTS {
                let y = lo + (hi - lo) * j as f64 / (MONOTONE_CHECK_POINTS - 1) as f64;
                check.push(VennEntry {
                    imputed_y: y,
                    prediction: eval.value(y)?,
                });
            }
            if !VennSet::from_entries(q.prediction, check).is_monotone() {
                set.warnings.push(format!(
                    "prediction is not monotone in the imputed value on a {MONOTONE_CHECK_POINTS}-point check grid; \
                     the extremes-only envelope may be incomplete"
                ));
            }
        }
        Ok(set)
    }

    pub fn oracle_prediction(&self, q: &MulticalQuery, target: f64) -> Result<f64> {
        self.evaluator(q)?.value(target)
    }

    /// Full refit on the augmented problem, without any fast path.
    pub fn oracle_fit(&self, q: &MulticalQuery, target: f64) -> Result<(OffsetFit, DesignMatrix)> {
        let n = self.design.nrows();
        let m = self.design.ncols();
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| self.design.row(i)).collect();
        rows.push(q.phi.clone());
        let values = nalgebra::DMatrix::from_fn(n + 1, m, |i, j| rows[i][j]);
        let design = DesignMatrix::new(values, self.design.column_names().to_vec())?;
        let mut residuals: Vec<f64> = self
            .targets
            .iter()
            .zip(&self.offsets)
            .map(|(t, f)| t - f)
            .collect();
        residuals.push(target - q.prediction);
        let fit = match self.loss.alpha() {
            None => fit_offset_ls(&residuals, &design, self.options.ridge)?,
            Some(alpha) => fit_offset_quantile(&residuals, &design, alpha, &self.options.solver)?,
        };
        Ok((fit, design))
    }
}

#[derive(Debug)]
enum Inner {
    Ls(SelfInfluence),
    Quantile {
        lp: Box<QuantileLp>,
        alpha: f64,
        warm: Option<Vec<usize>>,
    },
}

/// Per-query evaluator; pinball solves warm-start from the previous vertex.
#[derive(Debug)]
pub struct AugmentedEvaluator<'a> {
    model: &'a MulticalModel,
    query: MulticalQuery,
    inner: Inner,
}

impl AugmentedEvaluator<'_> {
    pub fn value(&mut self, target: f64) -> Result<f64> {
        Ok(self.value_detailed(target)?.0)
    }

    /// Calibrated prediction and whether the augmented row itself is
    /// interpolated by the fit (so the prediction equals the target up to
    /// rounding).
    pub fn value_detailed(&mut self, target: f64) -> Result<(f64, bool)> {
        if !target.is_finite() {
            return Err(Error::invalid("non-finite imputed value").at_imputed(target));
        }
        let residual = target - self.query.prediction;
        match &mut self.inner {
            Inner::Ls(infl) => Ok((self.query.prediction + infl.offset(residual), false)),
            Inner::Quantile { lp, alpha, warm } => {
                lp.set_last(residual);
                let sol = lp
                    .solve(*alpha, &self.model.options.solver, warm.as_deref())
                    .map_err(|e| e.at_imputed(target))?;
                let on_fit = sol.basis.contains(&(lp.n() - 1));
                let value = self.query.prediction + least_squares::dot(&self.query.phi, &sol.beta);
                *warm = Some(sol.basis);
                Ok((value, on_fit))
            }
        }
    }
}

/// Venn multicalibration at one query row of `query_data`.
#[allow(clippy::too_many_arguments)]
pub fn venn_multical(
    loss: &LossSpec,
    cal: &Dataset,
    pred_column: Option<&str>,
    spec: &BasisSpec,
    query_data: &Dataset,
    query_row: usize,
    grid: &ImputationGrid,
    mode: GridMode,
) -> Result<VennSet> {
    let model = MulticalModel::fit(
        loss.clone(),
        cal,
        pred_column,
        spec,
        MulticalOptions::default(),
    )?;
    let q = model.query(query_data, query_row, pred_column)?;
    model.venn_set(&q, grid, mode)
}

/// `|| ( (1/n) sum_i b_j(x_i) (y_i - yhat_i) )_j ||_2`.
pub fn multicalibration_error(preds: &[f64], design: &DesignMatrix, y: &[f64]) -> Result<f64> {
    let n = design.nrows();
    if preds.len() != n || y.len() != n {
        return Err(Error::invalid(format!(
            "{} predictions and {} outcomes for {n} design rows",
            preds.len(),
            y.len()
        )));
    }
    let resid: Vec<f64> = y.iter().zip(preds).map(|(a, b)| a - b).collect();
    Ok(design.transpose_times(&resid).norm() / n as f64)
}
