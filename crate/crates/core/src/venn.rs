//! Set calibration: Venn calibration around any in-sample calibrated point
//! calibrator, and Venn-Abers (the isotonic instance).
//!
//! For a query with raw prediction `x` and each imputed target `y` on an
//! [`ImputationGrid`], the calibrator is refit on the calibration samples
//! plus `(x, y)` and evaluated at `x`. The collected predictions form a
//! [`VennSet`]; the prediction for the true target (the oracle prediction)
//! is always one of its entries when the true target is on the grid.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use crate::calibrators::CalibratorAlgo;
use crate::calibrators::{
    fit_calibrator, key_units, HistogramInsertion, IsotonicIndex, IsotonicInsertion, StepCalibrator,
};
use crate::data::fmt_num;
use crate::error::{Error, Result};
use crate::loss::{LossSpec, WeightedSample};
use crate::par;

/// Number of points in the monotonicity check run before trusting an
/// extremes-only envelope.
pub const MONOTONE_CHECK_POINTS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridConstruction {
    EqualFrequency(usize),
    Explicit,
    Extremes,
}

/// Sorted, distinct candidate values for the unknown target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationGrid {
    values: Vec<f64>,
    construction: GridConstruction,
}

impl ImputationGrid {
    /// `m` values at the empirical `j/(m-1)` quantiles of `targets`
    /// (linear interpolation between order statistics), so the observed
    /// minimum and maximum are always included.
    pub fn equal_frequency(targets: &[f64], m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(
                "equal-frequency grid needs at least 2 points",
            ));
        }
        Ok(Self {
            values: equal_frequency_values(targets, m)?,
            construction: GridConstruction::EqualFrequency(m),
        })
    }

    pub fn explicit(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("explicit grid is empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("explicit grid has non-finite values"));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self {
            values,
            construction: GridConstruction::Explicit,
        })
    }

    pub fn extremes(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::invalid(format!(
                "extremes grid needs finite min < max, got [{min}, {max}]"
            )));
        }
        Ok(Self {
            values: vec![min, max],
            construction: GridConstruction::Extremes,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn construction(&self) -> GridConstruction {
        self.construction
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Distinct values at the `j/(m-1)` empirical quantiles of `xs`.
pub fn equal_frequency_values(xs: &[f64], m: usize) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::domain("cannot build a grid from no values"));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in grid source"));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out: Vec<f64> = (0..m)
        .map(|j| {
            if m == 1 {
                return sorted[0];
            }
            let pos = (n - 1) as f64 * j as f64 / (m - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            if frac == 0.0 {
                sorted[lo]
            } else {
                sorted[lo] + frac * (sorted[hi] - sorted[lo])
            }
        })
        .collect();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VennEntry {
    pub imputed_y: f64,
    pub prediction: f64,
}

/// The multiset of calibrated predictions at one query, over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VennSet {
    pub x_key: f64,
    pub entries: Vec<VennEntry>,
    pub lo: f64,
    pub hi: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl VennSet {
    pub(crate) fn from_entries(x_key: f64, entries: Vec<VennEntry>) -> Self {
        let lo = entries
            .iter()
            .map(|e| e.prediction)
            .fold(f64::INFINITY, f64::min);
        let hi = entries
            .iter()
            .map(|e| e.prediction)
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            x_key,
            entries,
            lo,
            hi,
            warnings: Vec::new(),
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Exact membership of a prediction value among the entries.
    pub fn contains(&self, prediction: f64) -> bool {
        self.entries.iter().any(|e| e.prediction == prediction)
    }

    pub fn entry_for(&self, imputed_y: f64) -> Option<&VennEntry> {
        self.entries.iter().find(|e| e.imputed_y == imputed_y)
    }

    /// Whether predictions are monotone (either direction) in the imputed value.
    pub fn is_monotone(&self) -> bool {
        let inc = self
            .entries
            .windows(2)
            .all(|w| w[0].prediction <= w[1].prediction);
        let dec = self
            .entries
            .windows(2)
            .all(|w| w[0].prediction >= w[1].prediction);
        inc || dec
    }
}

/// Calibration samples prepared once for repeated Venn queries.
#[derive(Debug, Clone)]
pub struct VennCalibrator {
    algo: CalibratorAlgo,
    loss: LossSpec,
    sorted: Vec<WeightedSample>,
    index: Option<Arc<IsotonicIndex>>,
}

/// Evaluates `A(f, C_n ∪ {(x, y)})(x)` for varying `y` at a fixed `x`.
#[derive(Debug, Clone)]
pub struct QueryEvaluator {
    x: f64,
    inner: Insertion,
}

#[derive(Debug, Clone)]
enum Insertion {
    Isotonic(IsotonicInsertion),
    Histogram(HistogramInsertion),
}

impl QueryEvaluator {
    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn value(&self, y: f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::invalid("non-finite imputed value").at_imputed(y));
        }
        Ok(match &self.inner {
            Insertion::Isotonic(i) => i.value_with(y, 1.0),
            Insertion::Histogram(h) => h.value_with(y, 1.0),
        })
    }
}

impl VennCalibrator {
    pub fn new(algo: CalibratorAlgo, loss: LossSpec, samples: &[WeightedSample]) -> Result<Self> {
        loss.validate()?;
        if samples.is_empty() {
            return Err(Error::domain("calibration set is empty"));
        }
        for s in samples {
            s.validate()?;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(WeightedSample::canonical_cmp);
        let index = matches!(algo, CalibratorAlgo::Isotonic)
            .then(|| Arc::new(IsotonicIndex::new(&loss, &key_units(&loss, &sorted))));
        Ok(Self {
            algo,
            loss,
            sorted,
            index,
        })
    }

    pub fn algo(&self) -> &CalibratorAlgo {
        &self.algo
    }

    pub fn loss(&self) -> &LossSpec {
        &self.loss
    }

    pub fn samples(&self) -> &[WeightedSample] {
        &self.sorted
    }

    pub fn at(&self, x: f64) -> Result<QueryEvaluator> {
        if !x.is_finite() {
            return Err(Error::invalid("non-finite query prediction"));
        }
        let inner = match &self.algo {
            CalibratorAlgo::Isotonic => {
                Insertion::Isotonic(self.index.as_ref().expect("isotonic index").insertion(x))
            }
            CalibratorAlgo::Histogram(cfg) => {
                Insertion::Histogram(HistogramInsertion::new(&self.loss, &self.sorted, x, cfg)?)
            }
        };
        Ok(QueryEvaluator { x, inner })
    }

    pub fn venn_set(&self, x: f64, grid: &ImputationGrid) -> Result<VennSet> {
        let eval = self.at(x)?;
        let entries = par::try_map(grid.values(), |&y| {
            Ok::<_, Error>(VennEntry {
                imputed_y: y,
                prediction: eval.value(y)?,
            })
        })?;
        let mut set = VennSet::from_entries(x, entries);
        if grid.construction() == GridConstruction::Extremes {
            let check =
                self.monotone_check(&eval, grid.min(), grid.max(), MONOTONE_CHECK_POINTS)?;
            if !check {
                set.warnings.push(format!(
                    "prediction is not monotone in the imputed value on a {MONOTONE_CHECK_POINTS}-point check grid; \
                     the extremes-only envelope may be incomplete"
                ));
            }
        }
        Ok(set)
    }

    fn monotone_check(
        &self,
        eval: &QueryEvaluator,
        lo: f64,
        hi: f64,
        points: usize,
    ) -> Result<bool> {
        let ys: Vec<f64> = (0..points)
            .map(|j| lo + (hi - lo) * j as f64 / (points - 1) as f64)
            .collect();
        let entries = ys
            .iter()
            .map(|&y| {
                Ok(VennEntry {
                    imputed_y: y,
                    prediction: eval.value(y)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VennSet::from_entries(eval.x, entries).is_monotone())
    }

    pub fn oracle_prediction(&self, x: f64, y_true: f64) -> Result<f64> {
        self.at(x)?.value(y_true)
    }

    /// Full refit on the augmented samples.
    pub fn oracle_fit(&self, x: f64, y_true: f64) -> Result<StepCalibrator> {
        let mut aug = self.sorted.clone();
        aug.push(WeightedSample::new(x, y_true));
        fit_calibrator(&self.algo, &self.loss, &aug)
    }

    pub fn batch(&self, pred_grid: &[f64], grid: &ImputationGrid) -> Result<VennTable> {
        if pred_grid.is_empty() {
            return Err(Error::domain("empty prediction grid"));
        }
        let mut keys = pred_grid.to_vec();
        keys.sort_by(f64::total_cmp);
        keys.dedup();
        let sets = par::try_map(&keys, |&k| self.venn_set(k, grid))?;
        Ok(VennTable { keys, sets })
    }
}

/// Venn calibration at one query.
pub fn venn_calibrate(
    algo: &CalibratorAlgo,
    loss: &LossSpec,
    cal: &[WeightedSample],
    x_pred: f64,
    grid: &ImputationGrid,
) -> Result<VennSet> {
    VennCalibrator::new(*algo, loss.clone(), cal)?.venn_set(x_pred, grid)
}

/// Venn calibration with generalized isotonic regression.
pub fn venn_abers(
    loss: &LossSpec,
    cal: &[WeightedSample],
    x_pred: f64,
    grid: &ImputationGrid,
) -> Result<VennSet> {
    venn_calibrate(&CalibratorAlgo::Isotonic, loss, cal, x_pred, grid)
}

/// Calibrated prediction from the calibration set augmented with the true target.
pub fn oracle_prediction(
    algo: &CalibratorAlgo,
    loss: &LossSpec,
    cal: &[WeightedSample],
    x_pred: f64,
    y_true: f64,
) -> Result<f64> {
    VennCalibrator::new(*algo, loss.clone(), cal)?.oracle_prediction(x_pred, y_true)
}

pub fn venn_batch(
    algo: &CalibratorAlgo,
    loss: &LossSpec,
    cal: &[WeightedSample],
    pred_grid: &[f64],
    grid: &ImputationGrid,
) -> Result<VennTable> {
    VennCalibrator::new(*algo, loss.clone(), cal)?.batch(pred_grid, grid)
}

/// Venn sets computed exactly at sorted prediction keys, with
/// nearest-key lookup in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VennTable {
    pub keys: Vec<f64>,
    pub sets: Vec<VennSet>,
}

impl VennTable {
    /// Index of the nearest key; ties go to the lower key.
    pub fn nearest_index(&self, x: f64) -> usize {
        let pos = self.keys.partition_point(|&k| k < x);
        if pos == 0 {
            return 0;
        }
        if pos == self.keys.len() {
            return pos - 1;
        }
        let (lo, hi) = (self.keys[pos - 1], self.keys[pos]);
        if x - lo <= hi - x {
            pos - 1
        } else {
            pos
        }
    }

    pub fn lookup(&self, x: f64) -> &VennSet {
        &self.sets[self.nearest_index(x)]
    }

    /// Long format: one row per (key, imputed value).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x_key", "imputed_y", "prediction"])?;
        for set in &self.sets {
            for e in &set.entries {
                wtr.write_record([
                    fmt_num(set.x_key),
                    fmt_num(e.imputed_y),
                    fmt_num(e.prediction),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}
