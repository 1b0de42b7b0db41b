//! Immutable calibration/evaluation tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    Continuous,
    Categorical { levels: usize },
}

/// Feature matrix, outcome and any number of precomputed model prediction
/// columns, all of one length `n >= 1`. Features are stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    feature_kinds: Vec<FeatureKind>,
    features: Vec<Vec<f64>>,
    y: Vec<f64>,
    pred_columns: BTreeMap<String, Vec<f64>>,
    level_maps: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl Feature {
    pub fn continuous(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Continuous,
            values,
        }
    }

    pub fn categorical(name: impl Into<String>, levels: usize, codes: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical { levels },
            values: codes,
        }
    }
}

impl Dataset {
    pub fn new(
        features: Vec<Feature>,
        y: Vec<f64>,
        pred_columns: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::invalid("dataset must contain at least one row"));
        }
        check_column("y", &y, n)?;
        for (name, col) in &pred_columns {
            check_column(name, col, n)?;
        }
        let mut names = Vec::with_capacity(features.len());
        let mut kinds = Vec::with_capacity(features.len());
        let mut cols = Vec::with_capacity(features.len());
        for f in features {
            check_column(&f.name, &f.values, n)?;
            if let FeatureKind::Categorical { levels } = f.kind {
                if let Some(bad) = f
                    .values
                    .iter()
                    .find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= levels as f64)
                {
                    return Err(Error::invalid(format!(
                        "categorical column '{}' has code {bad} outside [0, {levels})",
                        f.name
                    )));
                }
            }
            if names.contains(&f.name) {
                return Err(Error::invalid(format!("duplicate feature '{}'", f.name)));
            }
            names.push(f.name);
            kinds.push(f.kind);
            cols.push(f.values);
        }
        Ok(Self {
            feature_names: names,
            feature_kinds: kinds,
            features: cols,
            y,
            pred_columns,
            level_maps: BTreeMap::new(),
        })
    }

    pub fn with_level_maps(mut self, maps: BTreeMap<String, Vec<String>>) -> Self {
        self.level_maps = maps;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn pred(&self, name: &str) -> Result<&[f64]> {
        self.pred_columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn pred_names(&self) -> impl Iterator<Item = &str> {
        self.pred_columns.keys().map(String::as_str)
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_kinds(&self) -> &[FeatureKind] {
        &self.feature_kinds
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.features[j]
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn level_map(&self, name: &str) -> Option<&[String]> {
        self.level_maps.get(name).map(Vec::as_slice)
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.iter().map(|c| c[i]).collect()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |c: &Vec<f64>| indices.iter().map(|&i| c[i]).collect::<Vec<_>>();
        Dataset {
            feature_names: self.feature_names.clone(),
            feature_kinds: self.feature_kinds.clone(),
            features: self.features.iter().map(pick).collect(),
            y: pick(&self.y),
            pred_columns: self
                .pred_columns
                .iter()
                .map(|(k, v)| (k.clone(), pick(v)))
                .collect(),
            level_maps: self.level_maps.clone(),
        }
    }

    /// Copy with one prediction column added or replaced.
    pub fn with_pred_column(&self, name: &str, values: Vec<f64>) -> Result<Dataset> {
        check_column(name, &values, self.len())?;
        let mut out = self.clone();
        out.pred_columns.insert(name.to_string(), values);
        Ok(out)
    }

    /// Copy with the outcome replaced.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Dataset> {
        check_column("y", &y, self.len())?;
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }

    /// Write as CSV: features, outcome `y`, then prediction columns.
    /// Categorical columns are written with their level labels when known.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push("y");
        header.extend(self.pred_columns.keys().map(String::as_str));
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            for (j, name) in self.feature_names.iter().enumerate() {
                let v = self.features[j][i];
                match (self.feature_kinds[j], self.level_maps.get(name)) {
                    (FeatureKind::Categorical { .. }, Some(levels)) => {
                        rec.push(levels[v as usize].clone())
                    }
                    _ => rec.push(fmt_num(v)),
                }
            }
            rec.push(fmt_num(self.y[i]));
            for col in self.pred_columns.values() {
                rec.push(fmt_num(col[i]));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal representation.
pub fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn check_column(name: &str, col: &[f64], n: usize) -> Result<()> {
    if col.len() != n {
        return Err(Error::invalid(format!(
            "column '{name}' has length {} but dataset has {n} rows",
            col.len()
        )));
    }
    if let Some(i) = col.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "column '{name}' has non-finite value at row {i}"
        )));
    }
    Ok(())
}
