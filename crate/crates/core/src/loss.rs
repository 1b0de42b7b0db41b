//! Loss families, their derivatives, and pooled (block) minimizers.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Relative slack applied to the cumulative-weight target of an empirical
/// quantile, so that `(1 - alpha) * W` landing exactly on a cumulative
/// weight selects the left endpoint of the minimizer interval even after
/// rounding.
pub const QUANTILE_SLACK: f64 = 1e-9;

/// One calibration observation: the raw prediction it is grouped by, the
/// loss target (outcome, or conformity score for score-composed losses) and
/// a positive weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub key: f64,
    pub target: f64,
    pub weight: f64,
}

impl WeightedSample {
    pub fn new(key: f64, target: f64) -> Self {
        Self {
            key,
            target,
            weight: 1.0,
        }
    }

    pub fn weighted(key: f64, target: f64, weight: f64) -> Self {
        Self {
            key,
            target,
            weight,
        }
    }

    /// Total order by (key, target, weight) used to canonicalize inputs.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.key
            .total_cmp(&other.key)
            .then(self.target.total_cmp(&other.target))
            .then(self.weight.total_cmp(&other.weight))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !self.key.is_finite() || !self.target.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite sample (key {}, target {})",
                self.key, self.target
            )));
        }
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::invalid(format!(
                "sample weight must be positive and finite, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

/// Build unit-weight samples from aligned key and target columns.
pub fn samples_from(keys: &[f64], targets: &[f64]) -> Result<Vec<WeightedSample>> {
    if keys.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} keys but {} targets",
            keys.len(),
            targets.len()
        )));
    }
    let out: Vec<_> = keys
        .iter()
        .zip(targets)
        .map(|(&k, &t)| WeightedSample::new(k, t))
        .collect();
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScoreSpec {
    /// `s(x, y) = |y - mu(x)|` with `mu` read from a named prediction column.
    AbsResidual { mu_column: String },
}

impl ScoreSpec {
    pub fn score(&self, y: f64, mu: f64) -> f64 {
        match self {
            ScoreSpec::AbsResidual { .. } => (y - mu).abs(),
        }
    }

    pub fn mu_column(&self) -> &str {
        match self {
            ScoreSpec::AbsResidual { mu_column } => mu_column,
        }
    }
}

/// Loss family. Pinball is parameterized so that its population minimizer
/// is the `(1 - alpha)`-quantile:
/// `l(q, y) = (1 - alpha) (y - q) 1{y >= q} + alpha (q - y) 1{y < q}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossSpec {
    SquaredError,
    Pinball { alpha: f64 },
    ScorePinball { alpha: f64, score: ScoreSpec },
}

impl LossSpec {
    pub fn pinball(alpha: f64) -> Self {
        LossSpec::Pinball { alpha }
    }

    pub fn validate(&self) -> Result<()> {
        match self.alpha() {
            Some(a) if !(a > 0.0 && a < 1.0) => {
                Err(Error::invalid(format!("alpha must lie in (0, 1), got {a}")))
            }
            _ => Ok(()),
        }
    }

    /// Miscoverage level for the quantile losses.
    pub fn alpha(&self) -> Option<f64> {
        match self {
            LossSpec::SquaredError => None,
            LossSpec::Pinball { alpha } | LossSpec::ScorePinball { alpha, .. } => Some(*alpha),
        }
    }

    pub fn is_squared_error(&self) -> bool {
        matches!(self, LossSpec::SquaredError)
    }

    /// Short tag for reports.
    pub fn kind_name(&self) -> &'static str {
        match self {
            LossSpec::SquaredError => "squared-error",
            LossSpec::Pinball { .. } => "pinball",
            LossSpec::ScorePinball { .. } => "score-pinball",
        }
    }

    /// Loss targets for every row of `data`: the outcome, or the conformity
    /// score for [`LossSpec::ScorePinball`].
    pub fn targets(&self, data: &Dataset) -> Result<Vec<f64>> {
        match self {
            LossSpec::ScorePinball { score, .. } => {
                let mu = data.pred(score.mu_column())?;
                Ok(data
                    .y()
                    .iter()
                    .zip(mu)
                    .map(|(&y, &m)| score.score(y, m))
                    .collect())
            }
            _ => Ok(data.y().to_vec()),
        }
    }

    pub fn value(&self, eta: f64, target: f64) -> Result<f64> {
        check_finite(eta, target)?;
        Ok(match self.alpha() {
            None => (target - eta) * (target - eta),
            Some(alpha) => {
                if target >= eta {
                    (1.0 - alpha) * (target - eta)
                } else {
                    alpha * (eta - target)
                }
            }
        })
    }

    /// Derivative in `eta`. At the pinball kink (`target == eta`) the
    /// `target >= eta` branch is used, giving `alpha - 1`.
    pub fn derivative(&self, eta: f64, target: f64) -> Result<f64> {
        check_finite(eta, target)?;
        Ok(match self.alpha() {
            None => 2.0 * (eta - target),
            Some(alpha) => {
                if target >= eta {
                    alpha - 1.0
                } else {
                    alpha
                }
            }
        })
    }

    /// Subdifferential `[left derivative, right derivative]` in `eta`.
    pub fn subgradient(&self, eta: f64, target: f64) -> Result<(f64, f64)> {
        check_finite(eta, target)?;
        Ok(match self.alpha() {
            None => {
                let d = 2.0 * (eta - target);
                (d, d)
            }
            Some(alpha) => match target.partial_cmp(&eta) {
                Some(Ordering::Greater) => (alpha - 1.0, alpha - 1.0),
                Some(Ordering::Less) => (alpha, alpha),
                _ => (alpha - 1.0, alpha),
            },
        })
    }

    /// `argmin_c sum_i w_i l(c, z_i)`: the weighted mean for squared error,
    /// the smallest weighted `(1 - alpha)`-quantile for pinball losses.
    pub fn pool_minimizer(&self, block: &[WeightedSample]) -> Result<f64> {
        if block.is_empty() {
            return Err(Error::domain("pool minimizer of an empty block"));
        }
        for s in block {
            s.validate()?;
        }
        let (lo, hi) = block
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.target), hi.max(s.target))
            });
        let total: f64 = block.iter().map(|s| s.weight).sum();
        match self.alpha() {
            None => {
                let mean: f64 = block.iter().map(|s| (s.weight / total) * s.target).sum();
                Ok(mean.clamp(lo, hi))
            }
            Some(alpha) => {
                let mut items: Vec<(f64, f64)> =
                    block.iter().map(|s| (s.target, s.weight)).collect();
                items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                Ok(left_quantile(&items, 1.0 - alpha, total))
            }
        }
    }
}

fn check_finite(eta: f64, target: f64) -> Result<()> {
    if eta.is_finite() && target.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "non-finite loss argument (eta {eta}, target {target})"
        )))
    }
}

/// Smallest value whose cumulative weight reaches `level * total`.
/// `sorted` must be ordered by value.
pub(crate) fn left_quantile(sorted: &[(f64, f64)], level: f64, total: f64) -> f64 {
    let goal = level * total - QUANTILE_SLACK * total;
    let mut cum = 0.0;
    for &(v, w) in sorted {
        cum += w;
        if cum >= goal {
            return v;
        }
    }
    sorted.last().map(|p| p.0).unwrap_or(f64::NAN)
}

/// Mergeable sufficient statistic for a block's pooled minimizer.
#[derive(Debug, Clone)]
pub(crate) enum Pool {
    Mean {
        weight: f64,
        weighted_sum: f64,
    },
    Quantile {
        level: f64,
        weight: f64,
        items: Vec<(f64, f64)>,
    },
}

impl Pool {
    pub fn empty(loss: &LossSpec) -> Self {
        match loss.alpha() {
            None => Pool::Mean {
                weight: 0.0,
                weighted_sum: 0.0,
            },
            Some(alpha) => Pool::Quantile {
                level: 1.0 - alpha,
                weight: 0.0,
                items: Vec::new(),
            },
        }
    }

    pub fn from_samples<'a>(
        loss: &LossSpec,
        samples: impl IntoIterator<Item = &'a WeightedSample>,
    ) -> Self {
        let mut p = Pool::empty(loss);
        for s in samples {
            p.push(s.target, s.weight);
        }
        p
    }

    pub fn push(&mut self, target: f64, w: f64) {
        match self {
            Pool::Mean {
                weight,
                weighted_sum,
            } => {
                *weight += w;
                *weighted_sum += w * target;
            }
            Pool::Quantile { weight, items, .. } => {
                *weight += w;
                let pos = items.partition_point(|&(v, ww)| {
                    v.total_cmp(&target).then(ww.total_cmp(&w)) != Ordering::Greater
                });
                items.insert(pos, (target, w));
            }
        }
    }

    pub fn merge(&mut self, other: &Pool) {
        match (self, other) {
            (
                Pool::Mean {
                    weight,
                    weighted_sum,
                },
                Pool::Mean {
                    weight: w2,
                    weighted_sum: s2,
                },
            ) => {
                *weight += w2;
                *weighted_sum += s2;
            }
            (
                Pool::Quantile { weight, items, .. },
                Pool::Quantile {
                    weight: w2,
                    items: i2,
                    ..
                },
            ) => {
                *weight += w2;
                *items = merge_sorted(items, i2);
            }
            _ => unreachable!("pools of different loss kinds"),
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Pool::Mean {
                weight,
                weighted_sum,
            } => weighted_sum / weight,
            Pool::Quantile {
                level,
                weight,
                items,
            } => left_quantile(items, *level, *weight),
        }
    }
}

fn merge_sorted(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        let ord = a[i].0.total_cmp(&b[j].0).then(a[i].1.total_cmp(&b[j].1));
        if ord != Ordering::Greater {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(ys: &[f64]) -> Vec<WeightedSample> {
        ys.iter().map(|&y| WeightedSample::new(0.0, y)).collect()
    }

    #[test]
    fn values() {
        assert_eq!(LossSpec::SquaredError.value(1.0, 3.0).unwrap(), 4.0);
        assert_eq!(LossSpec::pinball(0.1).value(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(LossSpec::pinball(0.25).value(3.0, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn pinball_value_matches_grid_minimization() {
        // 0.5 at eta=3, y=1; the grid minimizer of the same one-point loss is y itself
        let loss = LossSpec::pinball(0.25);
        let best = (0..=400)
            .map(|k| k as f64 * 0.01)
            .min_by(|a, b| {
                loss.value(*a, 1.0)
                    .unwrap()
                    .total_cmp(&loss.value(*b, 1.0).unwrap())
            })
            .unwrap();
        assert!((best - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derivatives() {
        assert_eq!(LossSpec::SquaredError.derivative(1.0, 3.0).unwrap(), -4.0);
        let p = LossSpec::pinball(0.1);
        assert!((p.derivative(2.0, 3.0).unwrap() + 0.9).abs() < 1e-15);
        assert!((p.derivative(2.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        // kink convention
        assert!((p.derivative(2.0, 2.0).unwrap() + 0.9).abs() < 1e-15);
        let h = 1e-6;
        for (eta, y) in [(2.0, 3.0), (2.0, 1.0)] {
            let fd = (p.value(eta + h, y).unwrap() - p.value(eta - h, y).unwrap()) / (2.0 * h);
            assert!((fd - p.derivative(eta, y).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizers() {
        let se = LossSpec::SquaredError;
        assert_eq!(se.pool_minimizer(&unit(&[1.0, 2.0, 3.0])).unwrap(), 2.0);
        assert_eq!(
            LossSpec::pinball(0.5)
                .pool_minimizer(&unit(&[1.0, 2.0, 3.0]))
                .unwrap(),
            2.0
        );
        assert_eq!(
            LossSpec::pinball(0.25)
                .pool_minimizer(&unit(&[1.0, 2.0, 3.0, 4.0]))
                .unwrap(),
            3.0
        );
        assert_eq!(
            LossSpec::pinball(0.1)
                .pool_minimizer(&unit(&[1., 2., 3., 4., 5., 6., 7., 8., 9.]))
                .unwrap(),
            9.0
        );
    }

    #[test]
    fn quarter_pinball_grid_search_agrees() {
        let loss = LossSpec::pinball(0.25);
        let ys = [1.0, 2.0, 3.0, 4.0];
        let obj = |c: f64| ys.iter().map(|&y| loss.value(c, y).unwrap()).sum::<f64>();
        let grid: Vec<f64> = (0..=500).map(|k| k as f64 * 0.01).collect();
        let min = grid.iter().map(|&c| obj(c)).fold(f64::INFINITY, f64::min);
        let argmins: Vec<f64> = grid
            .iter()
            .copied()
            .filter(|&c| obj(c) <= min + 1e-12)
            .collect();
        assert!((argmins[0] - 3.0).abs() < 1e-12);
        assert!((argmins.last().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(LossSpec::SquaredError.pool_minimizer(&[]).is_err());
        assert!(LossSpec::SquaredError.value(f64::NAN, 1.0).is_err());
        assert!(LossSpec::pinball(1.5).validate().is_err());
    }

    #[test]
    fn pool_merge_matches_direct() {
        let loss = LossSpec::pinball(0.3);
        let a = unit(&[5.0, 1.0, 3.0]);
        let b = unit(&[2.0, 8.0]);
        let mut p = Pool::from_samples(&loss, &a);
        p.merge(&Pool::from_samples(&loss, &b));
        let all: Vec<_> = a.iter().chain(&b).copied().collect();
        assert_eq!(p.value(), loss.pool_minimizer(&all).unwrap());
    }
}
