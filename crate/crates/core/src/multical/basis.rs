//! Additive basis construction: intercept, truncated-power cubic splines for
//! continuous columns, one-hot indicators for categorical features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureKind};
use crate::error::{Error, Result};

pub const DEFAULT_KNOTS: usize = 5;

fn default_true() -> bool {
    true
}

fn default_knots() -> usize {
    DEFAULT_KNOTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineTerm {
    /// Feature name, or a prediction column name.
    pub column: String,
    #[serde(default = "default_knots")]
    pub num_knots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub splines: Vec<SplineTerm>,
    #[serde(default)]
    pub one_hot: Vec<String>,
    /// Rescale each spline input to `[0, 1]` on the calibration data before
    /// expanding. Does not change the spanned space.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self::intercept_only()
    }
}

impl BasisSpec {
    pub fn intercept_only() -> Self {
        Self {
            intercept: true,
            splines: Vec::new(),
            one_hot: Vec::new(),
            standardize: true,
        }
    }

    /// Intercept, a spline per continuous feature and one-hot columns per
    /// categorical feature of `data`.
    pub fn additive(data: &Dataset, num_knots: usize) -> Self {
        let mut spec = Self::intercept_only();
        for (name, kind) in data.feature_names().iter().zip(data.feature_kinds()) {
            match kind {
                FeatureKind::Continuous => spec.splines.push(SplineTerm {
                    column: name.clone(),
                    num_knots,
                }),
                FeatureKind::Categorical { .. } => spec.one_hot.push(name.clone()),
            }
        }
        spec
    }
}

/// Where a term reads its input from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Feature(String),
    Prediction(String),
}

impl Source {
    fn resolve(data: &Dataset, column: &str) -> Result<Self> {
        if data.feature_index(column).is_ok() {
            Ok(Source::Feature(column.to_string()))
        } else if data.pred(column).is_ok() {
            Ok(Source::Prediction(column.to_string()))
        } else {
            Err(Error::MissingColumn(column.to_string()))
        }
    }

    fn values<'a>(&self, data: &'a Dataset) -> Result<&'a [f64]> {
        match self {
            Source::Feature(name) => Ok(data.feature(data.feature_index(name)?)),
            Source::Prediction(name) => data.pred(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Term {
    Intercept,
    Spline {
        source: Source,
        shift: f64,
        scale: f64,
        degree: usize,
        /// Knots on the original scale.
        knots: Vec<f64>,
    },
    OneHot {
        source: Source,
        levels: Vec<f64>,
    },
}

/// `(x - k)^3` for `x > k`, else 0.
pub fn truncated_cubic(x: f64, knot: f64) -> f64 {
    if x > knot {
        (x - knot).powi(3)
    } else {
        0.0
    }
}

/// A basis frozen on calibration data: knots, scaling and category levels
/// never move afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    terms: Vec<Term>,
    column_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

impl Basis {
    pub fn fit(data: &Dataset, spec: &BasisSpec) -> Result<Self> {
        let mut terms = Vec::new();
        let mut names = Vec::new();
        let mut warnings = Vec::new();
        if spec.intercept {
            terms.push(Term::Intercept);
            names.push("(intercept)".to_string());
        }
        for t in &spec.splines {
            let source = Source::resolve(data, &t.column)?;
            if let Source::Feature(name) = &source {
                if let FeatureKind::Categorical { .. } =
                    data.feature_kinds()[data.feature_index(name)?]
                {
                    return Err(Error::invalid(format!(
                        "spline requested for categorical feature '{name}'"
                    )));
                }
            }
            let mut xs = source.values(data)?.to_vec();
            xs.sort_by(f64::total_cmp);
            let mut distinct = xs.clone();
            distinct.dedup();
            let d = distinct.len();
            if d < 2 {
                warnings.push(format!(
                    "'{}' is constant on the calibration data; it enters only through the intercept",
                    t.column
                ));
                continue;
            }
            let degree = 3.min(d - 1);
            let max_knots = if degree == 3 { d - 1 - degree } else { 0 };
            let want = t.num_knots.min(max_knots);
            let (lo, hi) = (distinct[0], distinct[d - 1]);
            let mut knots: Vec<f64> = (1..=want)
                .map(|j| interpolated_quantile(&xs, j as f64 / (want + 1) as f64))
                .filter(|&k| k > lo && k < hi)
                .collect();
            knots.dedup();
            if knots.len() < t.num_knots {
                warnings.push(format!(
                    "'{}': {} knots requested, {} used",
                    t.column,
                    t.num_knots,
                    knots.len()
                ));
            }
            if degree < 3 {
                warnings.push(format!(
                    "'{}' has {d} distinct values; polynomial degree reduced to {degree}",
                    t.column
                ));
            }
            let (shift, scale) = if spec.standardize {
                (lo, hi - lo)
            } else {
                (0.0, 1.0)
            };
            let label = &t.column;
            for p in 1..=degree {
                names.push(if p == 1 {
                    label.clone()
                } else {
                    format!("{label}^{p}")
                });
            }
            for k in &knots {
                names.push(format!("({label}-{k})^3+"));
            }
            terms.push(Term::Spline {
                source,
                shift,
                scale,
                degree,
                knots,
            });
        }
        for (pos, col) in spec.one_hot.iter().enumerate() {
            let idx = data.feature_index(col)?;
            if !matches!(data.feature_kinds()[idx], FeatureKind::Categorical { .. }) {
                return Err(Error::invalid(format!(
                    "one-hot encoding requested for continuous feature '{col}'"
                )));
            }
            let mut levels = data.feature(idx).to_vec();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            let drop_first = spec.intercept || pos > 0;
            let kept: Vec<f64> = if drop_first {
                levels[1..].to_vec()
            } else {
                levels
            };
            if kept.is_empty() {
                warnings.push(format!(
                    "'{col}' has a single level on the calibration data; it enters only through the intercept"
                ));
                continue;
            }
            let labels = data.level_map(col);
            for &l in &kept {
                let label = labels
                    .and_then(|m| m.get(l as usize))
                    .cloned()
                    .unwrap_or_else(|| format!("{l}"));
                names.push(format!("{col}={label}"));
            }
            terms.push(Term::OneHot {
                source: Source::Feature(col.clone()),
                levels: kept,
            });
        }
        if names.is_empty() {
            return Err(Error::invalid("basis has no columns"));
        }
        Ok(Self {
            terms,
            column_names: names,
            warnings,
        })
    }

    pub fn dim(&self) -> usize {
        self.column_names.len()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Knots of every spline term, on the original scale.
    pub fn knots(&self) -> Vec<(String, Vec<f64>)> {
        self.terms
            .iter()
            .filter_map(|t| match t {
                Term::Spline { source, knots, .. } => {
                    let name = match source {
                        Source::Feature(n) | Source::Prediction(n) => n.clone(),
                    };
                    Some((name, knots.clone()))
                }
                _ => None,
            })
            .collect()
    }

    /// Expand row `i` of `data` (which may be any dataset with the needed
    /// columns, not only the one the basis was fit on).
    pub fn row(&self, data: &Dataset, i: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        for t in &self.terms {
            match t {
                Term::Intercept => out.push(1.0),
                Term::Spline {
                    source,
                    shift,
                    scale,
                    degree,
                    knots,
                } => {
                    let x = source.values(data)?[i];
                    let z = (x - shift) / scale;
                    for p in 1..=*degree {
                        out.push(z.powi(p as i32));
                    }
                    for k in knots {
                        out.push(truncated_cubic(z, (k - shift) / scale));
                    }
                }
                Term::OneHot { source, levels } => {
                    let x = source.values(data)?[i];
                    out.extend(levels.iter().map(|&l| if x == l { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(out)
    }

    pub fn design(&self, data: &Dataset) -> Result<DesignMatrix> {
        let n = data.len();
        let m = self.dim();
        let mut values = DMatrix::zeros(n, m);
        for i in 0..n {
            let r = self.row(data, i)?;
            for (j, v) in r.into_iter().enumerate() {
                values[(i, j)] = v;
            }
        }
        DesignMatrix::new(values, self.column_names.clone())
    }
}

/// Linear interpolation between order statistics of sorted `xs`.
fn interpolated_quantile(xs: &[f64], p: f64) -> f64 {
    let pos = (xs.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(xs.len() - 1);
    xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
}

/// Fit a basis on `data` and return it with the calibration design matrix.
pub fn build_basis(data: &Dataset, spec: &BasisSpec) -> Result<(Basis, DesignMatrix)> {
    let basis = Basis::fit(data, spec)?;
    let design = basis.design(data)?;
    Ok((basis, design))
}

/// `n x m` basis evaluations, with an optional cached inverse of the
/// ridge-regularized Gram matrix.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    column_names: Vec<String>,
    gram: DMatrix<f64>,
    gram_inverse: Option<(f64, DMatrix<f64>)>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::invalid("design matrix must be non-empty"));
        }
        if column_names.len() != values.ncols() {
            return Err(Error::invalid(format!(
                "{} column names for {} columns",
                column_names.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite design entry"));
        }
        let gram = values.transpose() * &values;
        Ok(Self {
            values,
            column_names,
            gram,
            gram_inverse: None,
        })
    }

    /// Build from row vectors, naming columns `b0..`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("ragged design rows"));
        }
        let values = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]);
        Self::new(values, (0..m).map(|j| format!("b{j}")).collect())
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Unregularized `Phi^T Phi`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Cache `(Phi^T Phi + ridge I)^-1`.
    pub fn with_gram_inverse(mut self, ridge: f64) -> Result<Self> {
        let inv = regularized_inverse(&self.gram, ridge)?;
        self.gram_inverse = Some((ridge, inv));
        Ok(self)
    }

    /// Cached inverse and the ridge it was built with.
    pub fn gram_inverse(&self) -> Option<(f64, &DMatrix<f64>)> {
        self.gram_inverse.as_ref().map(|(r, m)| (*r, m))
    }

    pub fn transpose_times(&self, v: &[f64]) -> DVector<f64> {
        self.values.tr_mul(&DVector::from_column_slice(v))
    }

    pub fn times(&self, beta: &[f64]) -> Vec<f64> {
        (&self.values * DVector::from_column_slice(beta))
            .iter()
            .copied()
            .collect()
    }
}

/// Relative pivot threshold below which an unregularized Gram is singular.
const SINGULAR_PIVOT: f64 = 1e-13;

pub(crate) fn regularized_inverse(gram: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let chol = regularized_cholesky(gram, ridge)?;
    Ok(chol.inverse())
}

pub(crate) fn regularized_cholesky(
    gram: &DMatrix<f64>,
    ridge: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::invalid(format!(
            "ridge must be finite and >= 0, got {ridge}"
        )));
    }
    let m = gram.nrows();
    let a = gram + DMatrix::identity(m, m) * ridge;
    let max_diag = (0..m).map(|j| a[(j, j)]).fold(0.0, f64::max);
    let chol = a.cholesky().ok_or(Error::SingularGram)?;
    let min_pivot = (0..m)
        .map(|j| chol.l_dirty()[(j, j)].powi(2))
        .fold(f64::INFINITY, f64::min);
    if ridge == 0.0 && min_pivot <= SINGULAR_PIVOT * max_diag {
        return Err(Error::SingularGram);
    }
    Ok(chol)
}
