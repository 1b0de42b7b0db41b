//! Synthetic data-generating processes with exact oracle functions.
//!
//! Features are `x1, x2 ~ U(0, 1)` and a categorical `g` with uniform
//! levels. The outcome is `y = m(x) + sigma(x) * e` where
//! `m(x) = intercept + sine * sin(2 pi x1) + linear * x2 + group_effect[g]`,
//! `sigma(x) = (base + slope * x1) * group_multiplier[g]`, and `e` is standard
//! normal (hetero-gauss) or `Gamma(k, 1)` (skew-gamma, uncentered).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaSampler, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma, Normal};

use crate::data::{Dataset, Feature};
use crate::error::{Error, Result};

pub const GROUP_LABELS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpName {
    HeteroGauss,
    SkewGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanShape {
    pub intercept: f64,
    pub sine: f64,
    pub linear: f64,
    pub group_effects: Vec<f64>,
}

impl Default for MeanShape {
    fn default() -> Self {
        Self {
            intercept: 0.0,
            sine: 1.0,
            linear: 0.5,
            group_effects: vec![0.0, 0.3, -0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseScale {
    pub base: f64,
    pub slope: f64,
    pub group_multipliers: Vec<f64>,
}

impl Default for NoiseScale {
    fn default() -> Self {
        Self {
            base: 0.2,
            slope: 0.8,
            group_multipliers: vec![1.0, 1.0, 1.5],
        }
    }
}

/// How the bundled prediction columns are distorted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelColumns {
    /// `f = mean_scale * E[Y | X] + mean_shift`.
    pub mean_scale: f64,
    pub mean_shift: f64,
    /// `q = quantile_shrink * (true score quantile)`.
    pub quantile_shrink: f64,
    /// Miscoverage level the `q` column targets.
    pub alpha: f64,
}

impl Default for ModelColumns {
    fn default() -> Self {
        Self {
            mean_scale: 0.8,
            mean_shift: 0.1,
            quantile_shrink: 0.8,
            alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDgp {
    pub name: DgpName,
    #[serde(default)]
    pub mean: MeanShape,
    #[serde(default)]
    pub noise: NoiseScale,
    /// Shape `k` of the gamma noise; ignored for hetero-gauss.
    #[serde(default = "default_gamma_shape")]
    pub gamma_shape: f64,
    #[serde(default)]
    pub models: ModelColumns,
}

fn default_gamma_shape() -> f64 {
    2.0
}

/// Generated rows plus the exact oracle values at each row.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// `E[Y | X]`.
    pub mean: Vec<f64>,
    /// `(1 - alpha)`-quantile of `|Y - E[Y | X]|` given `X`.
    pub score_quantile: Vec<f64>,
}

impl SyntheticDgp {
    pub fn new(name: DgpName) -> Self {
        Self {
            name,
            mean: MeanShape::default(),
            noise: NoiseScale::default(),
            gamma_shape: default_gamma_shape(),
            models: ModelColumns::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.mean.group_effects.len();
        if g == 0 || g > GROUP_LABELS.len() {
            return Err(Error::Config(format!(
                "group_effects must have 1 to {} entries",
                GROUP_LABELS.len()
            )));
        }
        if self.noise.group_multipliers.len() != g {
            return Err(Error::Config(
                "group_multipliers and group_effects must have equal length".into(),
            ));
        }
        let params = [self.noise.base, self.noise.slope, self.gamma_shape];
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite noise parameter".into()));
        }
        if self.noise.base < 0.0
            || self.noise.base + self.noise.slope < 0.0
            || self.noise.group_multipliers.iter().any(|m| !(*m >= 0.0))
        {
            return Err(Error::Config("noise scale must be nonnegative".into()));
        }
        if self.name == DgpName::SkewGamma && !(self.gamma_shape > 0.0) {
            return Err(Error::Config("gamma_shape must be positive".into()));
        }
        let a = self.models.alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!(
                "models.alpha must lie in (0, 1), got {a}"
            )));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.mean.group_effects.len()
    }

    /// `m(x)`.
    pub fn m(&self, x1: f64, x2: f64, g: usize) -> f64 {
        let s = &self.mean;
        s.intercept + s.sine * (2.0 * PI * x1).sin() + s.linear * x2 + s.group_effects[g]
    }

    pub fn sigma(&self, x1: f64, g: usize) -> f64 {
        (self.noise.base + self.noise.slope * x1) * self.noise.group_multipliers[g]
    }

    /// `E[e]` for the standardized noise.
    fn e_mean(&self) -> f64 {
        match self.name {
            DgpName::HeteroGauss => 0.0,
            DgpName::SkewGamma => self.gamma_shape,
        }
    }

    pub fn conditional_mean(&self, x1: f64, x2: f64, g: usize) -> f64 {
        self.m(x1, x2, g) + self.sigma(x1, g) * self.e_mean()
    }

    /// `level`-quantile of `Y` given `X`.
    pub fn conditional_quantile(&self, x1: f64, x2: f64, g: usize, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::domain(format!(
                "quantile level {level} outside (0, 1)"
            )));
        }
        let e = match self.name {
            DgpName::HeteroGauss => standard_normal().inverse_cdf(level),
            DgpName::SkewGamma => self.gamma()?.inverse_cdf(level),
        };
        Ok(self.m(x1, x2, g) + self.sigma(x1, g) * e)
    }

    /// `u` with `P(|e - E e| <= u) = 1 - alpha`; the score quantile at `x`
    /// is `sigma(x) * u`.
    pub fn standardized_score_quantile(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::domain(format!("alpha {alpha} outside (0, 1)")));
        }
        match self.name {
            DgpName::HeteroGauss => Ok(standard_normal().inverse_cdf(1.0 - alpha / 2.0)),
            DgpName::SkewGamma => {
                let dist = self.gamma()?;
                let k = self.gamma_shape;
                let mass = |u: f64| dist.cdf(k + u) - dist.cdf((k - u).max(0.0));
                let (mut lo, mut hi) = (0.0, k.max(1.0));
                while mass(hi) < 1.0 - alpha {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mass(mid) < 1.0 - alpha {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-14 * hi {
                        break;
                    }
                }
                Ok(hi)
            }
        }
    }

    /// `E[Y - m(X)]` over the feature distribution.
    pub fn noise_mean(&self) -> f64 {
        let mult = &self.noise.group_multipliers;
        let avg_mult = mult.iter().sum::<f64>() / mult.len() as f64;
        (self.noise.base + 0.5 * self.noise.slope) * avg_mult * self.e_mean()
    }

    fn gamma(&self) -> Result<Gamma> {
        Gamma::new(self.gamma_shape, 1.0).map_err(|e| Error::Config(format!("gamma noise: {e}")))
    }

    /// Rows with features `x1, x2, g`, outcome `y`, and prediction columns
    /// `mu` (true conditional mean), `f` (distorted mean model), `med` (true
    /// conditional median) and `q` (shrunken score quantile).
    pub fn generate(&self, n: usize, seed: u64) -> Result<SyntheticData> {
        self.validate()?;
        if n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        let groups = self.num_groups();
        let sampler = match self.name {
            DgpName::HeteroGauss => None,
            DgpName::SkewGamma => Some(
                GammaSampler::new(self.gamma_shape, 1.0)
                    .map_err(|e| Error::Config(format!("gamma noise: {e}")))?,
            ),
        };
        let u = self.standardized_score_quantile(self.models.alpha)?;
        let median_e = match self.name {
            DgpName::HeteroGauss => 0.0,
            DgpName::SkewGamma => self.gamma()?.inverse_cdf(0.5),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: [Vec<f64>; 3] = Default::default();
        let (mut y, mut mu, mut f, mut med, mut q, mut sq) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let x1: f64 = rng.random();
            let x2: f64 = rng.random();
            let g = rng.random_range(0..groups);
            let e: f64 = match &sampler {
                None => StandardNormal.sample(&mut rng),
                Some(s) => s.sample(&mut rng),
            };
            let sigma = self.sigma(x1, g);
            let m = self.m(x1, x2, g);
            let mean = self.conditional_mean(x1, x2, g);
            cols[0].push(x1);
            cols[1].push(x2);
            cols[2].push(g as f64);
            y.push(m + sigma * e);
            mu.push(mean);
            f.push(self.models.mean_scale * mean + self.models.mean_shift);
            med.push(m + sigma * median_e);
            sq.push(sigma * u);
            q.push(self.models.quantile_shrink * sigma * u);
        }
        let [c1, c2, cg] = cols;
        let features = vec![
            Feature::continuous("x1", c1),
            Feature::continuous("x2", c2),
            Feature::categorical("g", groups, cg),
        ];
        let preds = BTreeMap::from([
            ("f".to_string(), f),
            ("med".to_string(), med),
            ("mu".to_string(), mu.clone()),
            ("q".to_string(), q),
        ]);
        let levels: Vec<String> = GROUP_LABELS[..groups]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let dataset = Dataset::new(features, y, preds)?
            .with_level_maps(BTreeMap::from([("g".to_string(), levels)]));
        Ok(SyntheticData {
            dataset,
            mean: mu,
            score_quantile: sq,
        })
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal parameters are valid")
}

pub fn gen_synthetic(dgp: &SyntheticDgp, n: usize, seed: u64) -> Result<SyntheticData> {
    dgp.generate(n, seed)
}
