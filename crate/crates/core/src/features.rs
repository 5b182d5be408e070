//! Feature extraction and standardization shared by behavior cloning and
//! reward-model fitting.

use serde::{Deserialize, Serialize};

use crate::bandit::{ClinicalContext, N_FEATURES};
use crate::error::{OpeError, Result};

/// Which cohort attributes are appended to the fifteen predictive features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub include_baseline_lab: bool,
    pub include_comorbidity: bool,
}

impl FeatureSet {
    /// The fifteen predictive features only.
    pub const CONTEXT_ONLY: FeatureSet = FeatureSet {
        include_baseline_lab: false,
        include_comorbidity: false,
    };

    /// Predictive features plus the pre-treatment lab (used for cloning,
    /// since the lab drives dosing).
    pub const WITH_BASELINE_LAB: FeatureSet = FeatureSet {
        include_baseline_lab: true,
        include_comorbidity: false,
    };

    pub fn dim(&self) -> usize {
        N_FEATURES + usize::from(self.include_baseline_lab) + usize::from(self.include_comorbidity)
    }

    pub fn extract(&self, ctx: &ClinicalContext) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(&ctx.features());
        if self.include_baseline_lab {
            x.push(ctx.baseline_lab);
        }
        if self.include_comorbidity {
            x.push(if ctx.comorbidity_flag { 1.0 } else { 0.0 });
        }
        x
    }
}

/// Per-column mean and scale. Columns with (near) zero spread keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit<'a, I>(rows: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        let mut collected: Vec<&[f64]> = Vec::new();
        for row in rows {
            if row.len() != dim {
                return Err(OpeError::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
            }
            collected.push(row);
            n += 1;
        }
        if n == 0 {
            return Err(OpeError::Empty("feature rows"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for row in &collected {
            for j in 0..dim {
                let d = row[j] - mean[j];
                sum_sq[j] += d * d;
            }
        }
        let scale = sum_sq
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Scaler { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(OpeError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}
