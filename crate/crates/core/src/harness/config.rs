//! Versioned JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::csvio::ColumnRoles;
use super::split::SplitSpec;
use super::synth::{DgpName, SyntheticDgp};
use crate::calibrators::{BinningConfig, CalibratorAlgo};
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::multical::{BasisSpec, MulticalOptions};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "VENNCAL_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "venncal-out";
pub const DEFAULT_GRID: usize = 200;
pub const DEFAULT_BINS: usize = 10;

fn default_alpha() -> f64 {
    0.1
}

fn default_replications() -> usize {
    1
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        roles: ColumnRoles,
    },
    Synthetic {
        /// Either a generator name or a full parameter block.
        #[serde(deserialize_with = "dgp_or_name")]
        dgp: SyntheticDgp,
        n: usize,
        seed: u64,
    },
}

fn dgp_or_name<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<SyntheticDgp, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Form {
        Name(DgpName),
        Full(SyntheticDgp),
    }
    match Form::deserialize(d) {
        Ok(Form::Name(name)) => Ok(SyntheticDgp::new(name)),
        Ok(Form::Full(dgp)) => Ok(dgp),
        Err(_) => Err(serde::de::Error::custom(
            "dgp must be \"hetero-gauss\", \"skew-gamma\" or a generator object",
        )),
    }
}

/// Prediction columns the methods read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnConfig {
    /// Model calibrated by the point-prediction methods.
    pub pred: String,
    /// Center `mu(x)` of the conformity score `|y - mu(x)|`.
    pub mu: String,
    /// Quantile model of the score; needed by the uncalibrated, Venn and
    /// Mondrian interval methods and for CCE.
    pub quantile: Option<String>,
}

impl Default for ColumnConfig {
    fn default() -> Self {
        Self {
            pred: "f".into(),
            mu: "mu".into(),
            quantile: Some("q".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Imputed outcome values per query (interval methods use half as many
    /// score levels, mirrored around `mu`).
    #[serde(default = "default_grid")]
    pub y_bins: usize,
    /// Precomputed query keys for the Venn lookup table.
    #[serde(default = "default_grid")]
    pub pred_bins: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            y_bins: DEFAULT_GRID,
            pred_bins: DEFAULT_GRID,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodSpec {
    /// Venn calibration with histogram binning.
    Venn {
        #[serde(default = "default_bins")]
        bins: usize,
    },
    VennAbers,
    Multical,
    /// The raw quantile column as threshold.
    CpUncalibrated,
    CpVenn {
        #[serde(default = "default_bins")]
        bins: usize,
    },
    CpVennAbers,
    CpMarginal,
    CpMondrian {
        #[serde(default = "default_bins")]
        bins: usize,
    },
    CpMultical,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Venn { bins } => format!("venn[K={bins}]"),
            MethodSpec::VennAbers => "venn-abers".into(),
            MethodSpec::Multical => "multical".into(),
            MethodSpec::CpUncalibrated => "cp-uncalibrated".into(),
            MethodSpec::CpVenn { bins } => format!("cp-venn[K={bins}]"),
            MethodSpec::CpVennAbers => "cp-venn-abers".into(),
            MethodSpec::CpMarginal => "cp-marginal".into(),
            MethodSpec::CpMondrian { bins } => format!("cp-mondrian[K={bins}]"),
            MethodSpec::CpMultical => "cp-multical".into(),
        }
    }

    pub fn is_interval(&self) -> bool {
        !matches!(
            self,
            MethodSpec::Venn { .. } | MethodSpec::VennAbers | MethodSpec::Multical
        )
    }

    pub(crate) fn algo(&self) -> Option<CalibratorAlgo> {
        match self {
            MethodSpec::Venn { bins } | MethodSpec::CpVenn { bins } => Some(
                CalibratorAlgo::Histogram(BinningConfig::uniform_mass(*bins)),
            ),
            MethodSpec::VennAbers | MethodSpec::CpVennAbers => Some(CalibratorAlgo::Isotonic),
            _ => None,
        }
    }

    fn needs_quantile(&self) -> bool {
        matches!(
            self,
            MethodSpec::CpUncalibrated
                | MethodSpec::CpVenn { .. }
                | MethodSpec::CpVennAbers
                | MethodSpec::CpMondrian { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    pub methods: Vec<MethodSpec>,
    /// Miscoverage level of the interval methods.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Loss of the point-prediction methods; squared error when absent.
    #[serde(default)]
    pub loss: Option<LossSpec>,
    #[serde(default)]
    pub columns: ColumnConfig,
    #[serde(default)]
    pub grid: GridConfig,
    /// Multicalibration basis; an additive spline/one-hot basis over all
    /// features when absent.
    #[serde(default)]
    pub basis: Option<BasisSpec>,
    #[serde(default)]
    pub multical: MulticalOptions,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Min-max rescale the outcome (and the mean-scale prediction columns)
    /// to `[0, 1]` before splitting.
    #[serde(default)]
    pub rescale_outcome: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative CSV path is taken relative to the
    /// file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(
            &std::fs::read_to_string(path)
                .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?,
        )?;
        if let DataSource::Csv { path: data, .. } = &mut cfg.data {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.split.validate()?;
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if let Some(loss) = &self.loss {
            loss.validate()?;
        }
        if self.grid.y_bins < 2 || self.grid.pred_bins < 1 {
            return Err(Error::Config(
                "grid sizes must be y_bins >= 2, pred_bins >= 1".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        let mut labels: Vec<String> = self.methods.iter().map(MethodSpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("method {} listed twice", w[0])));
        }
        for m in &self.methods {
            match m {
                MethodSpec::Venn { bins }
                | MethodSpec::CpVenn { bins }
                | MethodSpec::CpMondrian { bins }
                    if *bins == 0 =>
                {
                    return Err(Error::Config(format!(
                        "{}: bins must be positive",
                        m.label()
                    )));
                }
                _ => {}
            }
            if m.needs_quantile() && self.columns.quantile.is_none() {
                return Err(Error::Config(format!(
                    "{} needs a quantile column (columns.quantile)",
                    m.label()
                )));
            }
        }
        match &self.data {
            DataSource::Synthetic { dgp, n, .. } => {
                dgp.validate()?;
                if *n == 0 {
                    return Err(Error::Config("synthetic n must be at least 1".into()));
                }
            }
            DataSource::Csv { .. } => {}
        }
        Ok(())
    }

    pub fn point_loss(&self) -> LossSpec {
        self.loss.clone().unwrap_or(LossSpec::SquaredError)
    }

    /// Config value, else the environment variable, else `venncal-out`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}
