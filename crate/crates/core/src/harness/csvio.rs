//! CSV ingestion with explicit column roles.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Feature};
use crate::error::{Error, Result};

/// Which header names play which role. With `features = None` every column
/// that is neither the outcome nor a prediction is a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnRoles {
    pub outcome: String,
    #[serde(default)]
    pub predictions: Vec<String>,
    #[serde(default)]
    pub features: Option<Vec<String>>,
    /// Features forced to be categorical. Feature columns with any
    /// non-numeric cell are categorical regardless.
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl ColumnRoles {
    pub fn new(outcome: impl Into<String>) -> Self {
        Self {
            outcome: outcome.into(),
            predictions: Vec::new(),
            features: None,
            categorical: Vec::new(),
        }
    }

    pub fn with_predictions<S: Into<String>>(mut self, cols: impl IntoIterator<Item = S>) -> Self {
        self.predictions = cols.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedRow {
    /// 1-based data row (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped: Vec<DroppedRow>,
    pub categorical: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "null")
}

pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<(Dataset, ParseReport)> {
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_csv(file, roles).map_err(|e| match e {
        Error::EmptyFile(_) => Error::EmptyFile(path.to_path_buf()),
        other => other,
    })
}

/// Rows with a missing cell (empty, `NA`, `NaN`, `null`) in any used column
/// are dropped and reported; unparsable numbers are errors.
pub fn read_csv<R: Read>(reader: R, roles: &ColumnRoles) -> Result<(Dataset, ParseReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let index_of = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = index_of(&roles.outcome)?;
    let pred_cols: Vec<(String, usize)> = roles
        .predictions
        .iter()
        .map(|p| Ok((p.clone(), index_of(p)?)))
        .collect::<Result<_>>()?;
    let feature_names: Vec<String> = match &roles.features {
        Some(fs) => fs.clone(),
        None => header
            .iter()
            .filter(|h| **h != roles.outcome && !roles.predictions.contains(h))
            .cloned()
            .collect(),
    };
    let feature_cols: Vec<usize> = feature_names
        .iter()
        .map(|f| index_of(f))
        .collect::<Result<_>>()?;
    for c in &roles.categorical {
        if !feature_names.contains(c) {
            return Err(Error::Config(format!(
                "categorical column '{c}' is not a feature"
            )));
        }
    }
    let used: Vec<usize> = std::iter::once(y_col)
        .chain(pred_cols.iter().map(|p| p.1))
        .chain(feature_cols.iter().copied())
        .collect();

    let mut rows_read = 0;
    let mut dropped = Vec::new();
    let mut kept: Vec<(usize, csv::StringRecord)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        rows_read += 1;
        let row = k + 1;
        if let Some(&j) = used.iter().find(|&&j| rec.get(j).is_none_or(is_missing)) {
            dropped.push(DroppedRow {
                row,
                reason: format!("missing value in column '{}'", header[j]),
            });
            continue;
        }
        kept.push((row, rec));
    }
    if rows_read == 0 {
        return Err(Error::EmptyFile(Default::default()));
    }
    if kept.is_empty() {
        return Err(Error::invalid("every row was dropped for missing values"));
    }

    let parse_col = |j: usize| -> Result<Vec<f64>> {
        kept.iter()
            .map(|(row, rec)| {
                let cell = &rec[j];
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::NonNumeric {
                        row: *row,
                        column: header[j].clone(),
                        value: cell.to_string(),
                    })
            })
            .collect()
    };
    let y = parse_col(y_col)?;
    let mut preds = BTreeMap::new();
    for (name, j) in &pred_cols {
        preds.insert(name.clone(), parse_col(*j)?);
    }
    let mut features = Vec::with_capacity(feature_cols.len());
    let mut level_maps = BTreeMap::new();
    let mut categorical = Vec::new();
    for (name, &j) in feature_names.iter().zip(&feature_cols) {
        let numeric = !roles.categorical.contains(name)
            && kept
                .iter()
                .all(|(_, rec)| rec[j].parse::<f64>().is_ok_and(f64::is_finite));
        if numeric {
            features.push(Feature::continuous(name.clone(), parse_col(j)?));
            continue;
        }
        let levels: Vec<String> = kept
            .iter()
            .map(|(_, rec)| rec[j].to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let codes = kept
            .iter()
            .map(|(_, rec)| {
                levels
                    .binary_search_by(|l| l.as_str().cmp(&rec[j]))
                    .unwrap() as f64
            })
            .collect();
        features.push(Feature::categorical(name.clone(), levels.len(), codes));
        level_maps.insert(name.clone(), levels);
        categorical.push(name.clone());
    }
    let rows_kept = kept.len();
    let data = Dataset::new(features, y, preds)?.with_level_maps(level_maps);
    Ok((
        data,
        ParseReport {
            rows_read,
            rows_kept,
            dropped,
            categorical,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureKind;

    fn roles() -> ColumnRoles {
        ColumnRoles::new("y").with_predictions(["f"])
    }

    #[test]
    fn three_rows() {
        let text = "x,y,f\n1,2,3\n4,5,6\n7,8,9\n";
        let (d, rep) = read_csv(text.as_bytes(), &roles()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.pred("f").unwrap(), &[3.0, 6.0, 9.0]);
        assert_eq!(d.feature_names(), &["x".to_string()]);
        assert_eq!(rep.rows_kept, 3);
    }

    #[test]
    fn non_numeric_outcome_names_row() {
        let text = "x,y,f\n1,2,3\n4,oops,6\n";
        match read_csv(text.as_bytes(), &roles()) {
            Err(Error::NonNumeric { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "y", "oops"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn string_levels_are_coded() {
        let text = "g,y,f\nred,1,0\nblue,2,0\nred,3,0\n";
        let (d, rep) = read_csv(text.as_bytes(), &roles()).unwrap();
        assert_eq!(d.feature_kinds()[0], FeatureKind::Categorical { levels: 2 });
        assert_eq!(d.feature(0), &[1.0, 0.0, 1.0]);
        assert_eq!(
            d.level_map("g").unwrap(),
            &["blue".to_string(), "red".to_string()]
        );
        assert_eq!(rep.categorical, vec!["g".to_string()]);
    }

    #[test]
    fn missing_cells_drop_rows() {
        let text = "x,y,f\n1,2,3\n,5,6\n7,NA,9\n";
        let (d, rep) = read_csv(text.as_bytes(), &roles()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(rep.dropped.len(), 2);
        assert_eq!(rep.dropped[1].row, 3);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            read_csv("x,f\n1,2\n".as_bytes(), &roles()),
            Err(Error::MissingColumn(c)) if c == "y"
        ));
        assert!(matches!(
            read_csv("x,y,f\n".as_bytes(), &roles()),
            Err(Error::EmptyFile(_))
        ));
    }
}
