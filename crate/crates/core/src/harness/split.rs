//! Seeded train/calibration/test partitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fractions of rows assigned to each part; the random stream is selected
/// by `seed` and the replication index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub cal: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.5,
            cal: 0.3,
            test: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.cal, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Config(format!(
                "split fractions must be positive, got {parts:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    /// Part sizes for `n` rows; calibration and test are rounded, training
    /// takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let n_cal = (self.cal * n as f64).round() as usize;
        let n_test = (self.test * n as f64).round() as usize;
        if n_cal == 0 || n_test == 0 || n_cal + n_test > n {
            return Err(Error::invalid(format!(
                "{n} rows are too few for the split {:?}",
                (self.train, self.cal, self.test)
            )));
        }
        Ok((n - n_cal - n_test, n_cal, n_test))
    }

    /// Each row index lands in exactly one part. Index lists are sorted.
    pub fn split(&self, n: usize, replication: u64) -> Result<Split> {
        let (_, n_cal, n_test) = self.sizes(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replication);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut cal = idx[..n_cal].to_vec();
        let mut test = idx[n_cal..n_cal + n_test].to_vec();
        let mut train = idx[n_cal + n_test..].to_vec();
        cal.sort_unstable();
        test.sort_unstable();
        train.sort_unstable();
        Ok(Split { train, cal, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_every_row_once() {
        let spec = SplitSpec::default();
        let s = spec.split(101, 3).unwrap();
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.cal)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!((s.cal.len(), s.test.len()), (30, 20));
    }

    #[test]
    fn replications_differ_and_repeat() {
        let spec = SplitSpec::default();
        assert_eq!(spec.split(50, 1).unwrap(), spec.split(50, 1).unwrap());
        assert_ne!(spec.split(50, 1).unwrap(), spec.split(50, 2).unwrap());
    }

    #[test]
    fn rejects_bad_fractions() {
        let mut spec = SplitSpec::default();
        spec.train = 0.6;
        assert!(spec.validate().is_err());
        spec.train = 0.0;
        spec.cal = 0.8;
        assert!(spec.validate().is_err());
        assert!(SplitSpec::default().split(2, 0).is_err());
    }
}
