//! Coverage, width, conditional calibration error and plug-in calibration
//! error.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::ConformalSet;
use crate::data::fmt_num;
use crate::error::{Error, Result};
use crate::loss::{LossSpec, WeightedSample};

/// Groups smaller than this are merged into the nearest level.
pub const MIN_GROUP_SIZE: usize = 5;

pub const CCE_GROUPING: &str = "exact step levels; groups under 5 merged into nearest level";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    /// Calibrated threshold level (the smallest level in a merged group).
    pub key: f64,
    pub count: usize,
    pub coverage: f64,
    #[serde(default)]
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// `None` for methods that do not produce outcome sets.
    pub marginal_coverage: Option<f64>,
    pub avg_width: f64,
    pub cce: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_group: Vec<GroupRow>,
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
    pub n_test: usize,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, n_test: usize) -> Self {
        Self {
            method: method.into(),
            marginal_coverage: None,
            avg_width: f64::NAN,
            cce: None,
            per_group: Vec::new(),
            extras: BTreeMap::new(),
            n_test,
        }
    }

    pub const CSV_HEADER: [&'static str; 5] =
        ["method", "n_test", "marginal_coverage", "avg_width", "cce"];

    /// Flat row matching [`EvalReport::CSV_HEADER`]; missing values are empty.
    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
        vec![
            self.method.clone(),
            self.n_test.to_string(),
            opt(self.marginal_coverage),
            fmt_num(self.avg_width),
            opt(self.cce),
        ]
    }

    pub fn write_csv<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(Self::CSV_HEADER)?;
        for r in reports {
            wtr.write_record(r.csv_row())?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Fraction of test outcomes inside their sets and the mean hull width.
pub fn coverage_and_width(sets: &[ConformalSet], y_test: &[f64]) -> Result<(f64, f64)> {
    if sets.len() != y_test.len() {
        return Err(Error::invalid(format!(
            "{} sets for {} outcomes",
            sets.len(),
            y_test.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::domain("no test points"));
    }
    let n = sets.len() as f64;
    let covered = sets
        .iter()
        .zip(y_test)
        .filter(|(s, &y)| s.contains(y))
        .count();
    let width = sets.iter().map(ConformalSet::width).sum::<f64>() / n;
    Ok((covered as f64 / n, width))
}

/// `sum_g (n_g / n) max(0, miscoverage_g - alpha)` over the level sets of
/// `fstar`, plus the per-group table.
pub fn cce_groups(covered: &[bool], fstar: &[f64], alpha: f64) -> Result<(f64, Vec<GroupRow>)> {
    if covered.len() != fstar.len() {
        return Err(Error::invalid("coverage flags and levels must align"));
    }
    if covered.is_empty() {
        return Err(Error::domain("no test points"));
    }
    if fstar.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite calibrated level"));
    }
    let mut levels: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
    for (&c, &f) in covered.iter().zip(fstar) {
        // order-preserving key for f64
        let bits = f.to_bits();
        let key = if f >= 0.0 { bits | (1 << 63) } else { !bits };
        let e = levels.entry(key).or_insert((f, 0, 0));
        e.1 += 1;
        e.2 += usize::from(c);
    }
    let mut groups: Vec<(f64, usize, usize, bool)> = levels
        .into_values()
        .map(|(f, n, c)| (f, n, c, false))
        .collect();
    // merge small groups into the nearest neighbouring level
    while groups.len() > 1 {
        let Some(i) = groups.iter().position(|g| g.1 < MIN_GROUP_SIZE) else {
            break;
        };
        let j = if i == 0 {
            1
        } else if i + 1 == groups.len()
            || groups[i].0 - groups[i - 1].0 <= groups[i + 1].0 - groups[i].0
        {
            i - 1
        } else {
            i + 1
        };
        let (a, b) = (i.min(j), i.max(j));
        let gb = groups.remove(b);
        let ga = &mut groups[a];
        ga.1 += gb.1;
        ga.2 += gb.2;
        ga.3 = true;
    }
    let n = covered.len() as f64;
    let mut total = 0.0;
    let rows = groups
        .into_iter()
        .map(|(key, count, cov, merged)| {
            let coverage = cov as f64 / count as f64;
            total += count as f64 / n * ((1.0 - coverage) - alpha).max(0.0);
            GroupRow {
                key,
                count,
                coverage,
                merged,
            }
        })
        .collect();
    Ok((total, rows))
}

pub fn cce(sets: &[ConformalSet], y_test: &[f64], fstar_test: &[f64], alpha: f64) -> Result<f64> {
    if sets.len() != y_test.len() {
        return Err(Error::invalid("sets and outcomes must align"));
    }
    let covered: Vec<bool> = sets
        .iter()
        .zip(y_test)
        .map(|(s, &y)| s.contains(y))
        .collect();
    Ok(cce_groups(&covered, fstar_test, alpha)?.0)
}

/// `sum_v (n_v / N) (mean of dl(v, z) over points predicted v)^2`.
pub fn cal_l2_plugin(preds: &[f64], samples: &[WeightedSample], loss: &LossSpec) -> Result<f64> {
    if preds.len() != samples.len() {
        return Err(Error::invalid("predictions and samples must align"));
    }
    if preds.is_empty() {
        return Err(Error::domain("no evaluation points"));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    let n = preds.len() as f64;
    let mut total = 0.0;
    let mut start = 0;
    while start < order.len() {
        let v = preds[order[start]];
        let end = start + order[start..].partition_point(|&i| preds[i] == v);
        let mut sum = 0.0;
        for &i in &order[start..end] {
            sum += loss.derivative(v, samples[i].target)?;
        }
        let count = (end - start) as f64;
        total += count / n * (sum / count).powi(2);
        start = end;
    }
    Ok(total)
}
