//! Conformal prediction sets from calibrated score quantiles.
//!
//! With the score `s(x, y) = |y - mu(x)|`, a candidate `y` is accepted when
//! `s(x, y)` does not exceed the calibrated `(1 - alpha)`-quantile of the
//! score computed on the calibration set augmented with `(x, s(x, y))`. The
//! quantile is produced either by Venn calibration of a quantile model
//! ([`VennCp`]) or by Venn multicalibration over a basis ([`MulticalCp`]).
//! Marginal and Mondrian split-conformal sets are the constant and
//! group-indicator special cases.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibrators::{uniform_mass_bins, Binning, BinningConfig, CalibratorAlgo};
use crate::data::{fmt_num, Dataset};
use crate::error::{Error, Result};
use crate::loss::{samples_from, LossSpec};
use crate::multical::{Basis, BasisSpec, MulticalModel, MulticalOptions, MulticalQuery};
use crate::venn::VennCalibrator;

/// Relative width at which boundary bisection stops.
const BISECTION_TOL: f64 = 1e-10;

fn is_false(b: &bool) -> bool {
    !*b
}

/// Accepted outcomes at one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalSet {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid_members: Vec<f64>,
    /// Disjoint, sorted closed intervals.
    pub intervals: Vec<(f64, f64)>,
    /// `None` for the empty set.
    pub hull: Option<(f64, f64)>,
    /// Outcomes whose score exactly equals its threshold (accepted).
    #[serde(default)]
    pub tie_events: Vec<f64>,
    /// The outermost grid point on some side was accepted, so the set may
    /// extend beyond the grid.
    #[serde(default, skip_serializing_if = "is_false")]
    pub truncated: bool,
}

impl ConformalSet {
    /// `[mu - q, mu + q]`; empty when `q < 0`, the whole line when `q = +inf`.
    pub fn from_threshold(alpha: f64, mu: f64, q: f64) -> Self {
        let intervals = if q >= 0.0 {
            vec![(mu - q, mu + q)]
        } else {
            Vec::new()
        };
        Self {
            alpha,
            grid_members: Vec::new(),
            hull: intervals.first().copied(),
            intervals,
            tie_events: Vec::new(),
            truncated: false,
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= y && y <= hi)
    }

    /// Width of the hull (0 for the empty set).
    pub fn width(&self) -> f64 {
        self.hull.map_or(0.0, |(lo, hi)| hi - lo)
    }

    pub fn lower(&self) -> f64 {
        self.hull.map_or(f64::NAN, |h| h.0)
    }

    pub fn upper(&self) -> f64 {
        self.hull.map_or(f64::NAN, |h| h.1)
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub accepted: bool,
    pub tie: bool,
}

impl Decision {
    fn compare(score: f64, threshold: f64) -> Self {
        Self {
            accepted: score <= threshold,
            tie: score == threshold,
        }
    }
}

/// Evaluate `accept` on the grid, bisect every cell whose endpoints
/// disagree, and collect maximal accepted runs.
pub fn assemble<F>(alpha: f64, y_grid: &[f64], mut accept: F) -> Result<ConformalSet>
where
    F: FnMut(f64) -> Result<Decision>,
{
    check_alpha(alpha)?;
    if y_grid.is_empty() || y_grid.iter().any(|y| !y.is_finite()) {
        return Err(Error::invalid("outcome grid must be non-empty and finite"));
    }
    let mut grid = y_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut ties = Vec::new();
    let mut eval = |y: f64, ties: &mut Vec<f64>| -> Result<bool> {
        let d = accept(y).map_err(|e| e.at_imputed(y))?;
        if d.tie && d.accepted {
            ties.push(y);
        }
        Ok(d.accepted)
    };
    let flags = grid
        .iter()
        .map(|&y| eval(y, &mut ties))
        .collect::<Result<Vec<bool>>>()?;

    let mut probes: Vec<(f64, bool)> = grid.iter().copied().zip(flags.iter().copied()).collect();
    for k in 0..grid.len().saturating_sub(1) {
        if flags[k] == flags[k + 1] {
            continue;
        }
        let (mut a, mut b) = (grid[k], grid[k + 1]);
        let fa = flags[k];
        let tol = BISECTION_TOL * (1.0 + a.abs().max(b.abs()));
        while b - a > tol {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if eval(mid, &mut ties)? == fa {
                a = mid;
            } else {
                b = mid;
            }
        }
        probes.push((a, fa));
        probes.push((b, !fa));
    }
    probes.sort_by(|p, q| p.0.total_cmp(&q.0));
    probes.dedup_by(|p, q| p.0 == q.0);

    let mut intervals = Vec::new();
    let mut start: Option<f64> = None;
    let mut last = f64::NAN;
    for &(y, acc) in &probes {
        match (acc, start) {
            (true, None) => start = Some(y),
            (false, Some(s)) => {
                intervals.push((s, last));
                start = None;
            }
            _ => {}
        }
        if acc {
            last = y;
        }
    }
    if let Some(s) = start {
        intervals.push((s, last));
    }
    ties.sort_by(f64::total_cmp);
    ties.dedup();
    let members: Vec<f64> = grid
        .iter()
        .zip(&flags)
        .filter(|(_, &a)| a)
        .map(|(&y, _)| y)
        .collect();
    Ok(ConformalSet {
        alpha,
        hull: intervals
            .first()
            .map(|f| (f.0, intervals.last().expect("non-empty").1)),
        intervals,
        truncated: flags[0] || flags[flags.len() - 1],
        grid_members: members,
        tie_events: ties,
    })
}

/// [`assemble`] for decisions that depend on `y` only through the score
/// `|y - mu|`: runs once over the score levels (0 included) and mirrors the
/// accepted score set around `mu`.
pub fn assemble_symmetric<F>(
    alpha: f64,
    mu: f64,
    score_levels: &[f64],
    accept: F,
) -> Result<ConformalSet>
where
    F: FnMut(f64) -> Result<Decision>,
{
    if !mu.is_finite() || score_levels.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::invalid(
            "score levels must be non-negative and mu finite",
        ));
    }
    let mut levels = score_levels.to_vec();
    levels.push(0.0);
    let half = assemble(alpha, &levels, accept)?;
    let mut intervals = Vec::with_capacity(2 * half.intervals.len());
    for &(a, b) in half.intervals.iter().rev() {
        if a > 0.0 {
            intervals.push((mu - b, mu - a));
        }
    }
    for &(a, b) in &half.intervals {
        if a > 0.0 {
            intervals.push((mu + a, mu + b));
        } else {
            intervals.push((mu - b, mu + b));
        }
    }
    let mirror = |v: &[f64]| {
        let mut out: Vec<f64> = v.iter().flat_map(|&s| [mu - s, mu + s]).collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    };
    Ok(ConformalSet {
        alpha,
        hull: intervals
            .first()
            .map(|f| (f.0, intervals.last().expect("non-empty").1)),
        intervals,
        grid_members: mirror(&half.grid_members),
        tie_events: mirror(&half.tie_events),
        truncated: half
            .grid_members
            .last()
            .is_some_and(|&s| s == levels.iter().copied().fold(0.0, f64::max)),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )))
    }
}

/// The `ceil((n + 1)(1 - alpha))`-th smallest score, or `+inf` when that
/// index exceeds `n`.
pub fn marginal_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::domain("no calibration scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite calibration score"));
    }
    let n = scores.len();
    // guard the product against rounding just above an integer
    let raw = (n as f64 + 1.0) * (1.0 - alpha);
    let k = (raw - 1e-9 * raw.max(1.0)).ceil().max(1.0) as usize;
    if k > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

pub fn marginal_baseline(cal_scores: &[f64], alpha: f64, x_mu: f64) -> Result<ConformalSet> {
    Ok(ConformalSet::from_threshold(
        alpha,
        x_mu,
        marginal_threshold(cal_scores, alpha)?,
    ))
}

pub fn mondrian_baseline(
    cal_scores: &[f64],
    group_ids: &[i64],
    alpha: f64,
    x_group: i64,
    x_mu: f64,
) -> Result<ConformalSet> {
    if cal_scores.len() != group_ids.len() {
        return Err(Error::invalid("scores and group ids must align"));
    }
    let members: Vec<f64> = cal_scores
        .iter()
        .zip(group_ids)
        .filter(|(_, &g)| g == x_group)
        .map(|(&s, _)| s)
        .collect();
    if members.is_empty() {
        return Err(Error::EmptyGroup { group: x_group });
    }
    marginal_baseline(&members, alpha, x_mu)
}

/// How calibration points are grouped for Mondrian sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingSpec {
    None,
    /// Uniform-mass bins of the quantile model's predictions.
    PredictionBins(usize),
}

/// Per-group thresholds precomputed on the calibration set.
#[derive(Debug, Clone)]
pub struct MondrianCp {
    alpha: f64,
    binning: Option<Binning>,
    thresholds: BTreeMap<i64, f64>,
}

impl MondrianCp {
    pub fn new(
        grouping: GroupingSpec,
        quantile_preds: &[f64],
        cal_scores: &[f64],
        alpha: f64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if quantile_preds.len() != cal_scores.len() {
            return Err(Error::invalid("quantile predictions and scores must align"));
        }
        let binning = match grouping {
            GroupingSpec::None => None,
            GroupingSpec::PredictionBins(k) => {
                if k == 0 {
                    return Err(Error::invalid("number of groups must be positive"));
                }
                Some(uniform_mass_bins(
                    quantile_preds,
                    &BinningConfig::uniform_mass(k),
                )?)
            }
        };
        let group = |q: f64| binning.as_ref().map_or(0, |b| b.bin_of(q) as i64);
        let mut members: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for (&q, &s) in quantile_preds.iter().zip(cal_scores) {
            members.entry(group(q)).or_default().push(s);
        }
        let thresholds = members
            .into_iter()
            .map(|(g, s)| Ok((g, marginal_threshold(&s, alpha)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            alpha,
            binning,
            thresholds,
        })
    }

    pub fn group_of(&self, q: f64) -> i64 {
        self.binning.as_ref().map_or(0, |b| b.bin_of(q) as i64)
    }

    pub fn num_groups(&self) -> usize {
        self.thresholds.len()
    }

    pub fn threshold(&self, group: i64) -> Result<f64> {
        self.thresholds
            .get(&group)
            .copied()
            .ok_or(Error::EmptyGroup { group })
    }

    pub fn interval(&self, mu_x: f64, q_x: f64) -> Result<ConformalSet> {
        Ok(ConformalSet::from_threshold(
            self.alpha,
            mu_x,
            self.threshold(self.group_of(q_x))?,
        ))
    }
}

/// Venn calibration of a score-quantile model under the pinball loss.
#[derive(Debug, Clone)]
pub struct VennCp {
    alpha: f64,
    calibrator: VennCalibrator,
}

impl VennCp {
    pub fn new(
        algo: CalibratorAlgo,
        alpha: f64,
        quantile_preds: &[f64],
        cal_scores: &[f64],
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let samples = samples_from(quantile_preds, cal_scores)?;
        Ok(Self {
            alpha,
            calibrator: VennCalibrator::new(algo, LossSpec::pinball(alpha), &samples)?,
        })
    }

    pub fn calibrator(&self) -> &VennCalibrator {
        &self.calibrator
    }

    /// Calibrated threshold at a query with quantile prediction `q_x`,
    /// after imputing the score `s`.
    pub fn threshold(&self, q_x: f64, s: f64) -> Result<f64> {
        self.calibrator.at(q_x)?.value(s)
    }

    pub fn decide(&self, q_x: f64, s: f64) -> Result<Decision> {
        Ok(Decision::compare(s, self.threshold(q_x, s)?))
    }

    pub fn interval(&self, mu_x: f64, q_x: f64, y_grid: &[f64]) -> Result<ConformalSet> {
        let eval = self.calibrator.at(q_x)?;
        assemble(self.alpha, y_grid, |y| {
            let s = (y - mu_x).abs();
            Ok(Decision::compare(s, eval.value(s)?))
        })
    }

    /// Same set as [`VennCp::interval`] on the grid `mu_x +- score_levels`,
    /// with half the evaluations.
    pub fn symmetric_interval(
        &self,
        mu_x: f64,
        q_x: f64,
        score_levels: &[f64],
    ) -> Result<ConformalSet> {
        let eval = self.calibrator.at(q_x)?;
        assemble_symmetric(self.alpha, mu_x, score_levels, |s| {
            Ok(Decision::compare(s, eval.value(s)?))
        })
    }
}

pub fn venn_cp_interval(
    quantile_preds: &[f64],
    cal_scores: &[f64],
    algo: CalibratorAlgo,
    alpha: f64,
    mu_x: f64,
    q_x: f64,
    y_grid: &[f64],
) -> Result<ConformalSet> {
    VennCp::new(algo, alpha, quantile_preds, cal_scores)?.interval(mu_x, q_x, y_grid)
}

/// Venn multicalibration of the score quantile over a basis; with an
/// optional offset model (a quantile prediction column).
#[derive(Debug, Clone)]
pub struct MulticalCp {
    alpha: f64,
    model: MulticalModel,
    offset_column: Option<String>,
}

impl MulticalCp {
    pub fn new(
        alpha: f64,
        cal: &Dataset,
        cal_scores: &[f64],
        spec: &BasisSpec,
        offset_column: Option<&str>,
        options: MulticalOptions,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let basis = Basis::fit(cal, spec)?;
        let offsets = match offset_column {
            Some(c) => cal.pred(c)?.to_vec(),
            None => vec![0.0; cal.len()],
        };
        let model = MulticalModel::from_parts(
            LossSpec::pinball(alpha),
            basis,
            cal,
            offsets,
            cal_scores.to_vec(),
            options,
        )?;
        Ok(Self {
            alpha,
            model,
            offset_column: offset_column.map(str::to_string),
        })
    }

    pub fn model(&self) -> &MulticalModel {
        &self.model
    }

    pub fn query(&self, data: &Dataset, row: usize) -> Result<MulticalQuery> {
        self.model.query(data, row, self.offset_column.as_deref())
    }

    pub fn decide(&self, q: &MulticalQuery, s: f64) -> Result<Decision> {
        let mut eval = self.model.evaluator(q)?;
        let (thr, on_fit) = eval.value_detailed(s)?;
        Ok(interpolated_decision(s, thr, on_fit))
    }

    pub fn interval(&self, q: &MulticalQuery, mu_x: f64, y_grid: &[f64]) -> Result<ConformalSet> {
        let mut eval = self.model.evaluator(q)?;
        assemble(self.alpha, y_grid, |y| {
            let s = (y - mu_x).abs();
            let (thr, on_fit) = eval.value_detailed(s)?;
            Ok(interpolated_decision(s, thr, on_fit))
        })
    }

    pub fn symmetric_interval(
        &self,
        q: &MulticalQuery,
        mu_x: f64,
        score_levels: &[f64],
    ) -> Result<ConformalSet> {
        let mut eval = self.model.evaluator(q)?;
        assemble_symmetric(self.alpha, mu_x, score_levels, |s| {
            let (thr, on_fit) = eval.value_detailed(s)?;
            Ok(interpolated_decision(s, thr, on_fit))
        })
    }
}

/// A fit that interpolates the imputed row has threshold equal to the score;
/// accept it as a tie rather than trusting the rounded comparison.
fn interpolated_decision(s: f64, thr: f64, on_fit: bool) -> Decision {
    if on_fit {
        Decision {
            accepted: true,
            tie: true,
        }
    } else {
        Decision::compare(s, thr)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn multical_cp_interval(
    cal: &Dataset,
    cal_scores: &[f64],
    spec: &BasisSpec,
    alpha: f64,
    query_data: &Dataset,
    query_row: usize,
    mu_x: f64,
    y_grid: &[f64],
) -> Result<ConformalSet> {
    let cp = MulticalCp::new(
        alpha,
        cal,
        cal_scores,
        spec,
        None,
        MulticalOptions::default(),
    )?;
    let q = cp.query(query_data, query_row)?;
    cp.interval(&q, mu_x, y_grid)
}

/// Symmetric outcome grid `mu +- s` over score levels `s` (0 included).
pub fn score_grid(mu: f64, score_levels: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * score_levels.len() + 1);
    out.push(mu);
    for &s in score_levels {
        if s > 0.0 {
            out.push(mu - s);
            out.push(mu + s);
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// One CSV row per test point: `y, lower, upper, covered, width`.
pub fn write_rows<W: Write>(sets: &[ConformalSet], y_test: &[f64], w: W) -> Result<()> {
    if sets.len() != y_test.len() {
        return Err(Error::invalid("sets and outcomes must align"));
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["y", "lower", "upper", "covered", "width"])?;
    for (set, &y) in sets.iter().zip(y_test) {
        wtr.write_record([
            fmt_num(y),
            fmt_num(set.lower()),
            fmt_num(set.upper()),
            u8::from(set.contains(y)).to_string(),
            fmt_num(set.width()),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
