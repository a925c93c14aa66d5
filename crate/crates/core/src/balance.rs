//! SMOTE oversampling of the positive (attack) class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::preprocess::{FeatureRow, Label};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    /// Upper bound on normal / malicious after augmentation.
    pub target_ratio: f64,
    pub k_neighbors: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            target_ratio: 294.12,
            k_neighbors: 5,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio.is_finite() && self.target_ratio >= 1.0) {
            return Err(Error::config("target_ratio", "must be finite and >= 1"));
        }
        if self.k_neighbors == 0 {
            return Err(Error::config("k_neighbors", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    /// Original rows in order, followed by the synthetic ones.
    pub rows: Vec<FeatureRow>,
    pub synthetic: usize,
    pub warnings: Vec<String>,
}

/// `x + lambda * (neighbor - x)`.
pub fn interpolate(x: &[f64], neighbor: &[f64], lambda: f64) -> Vec<f64> {
    x.iter().zip(neighbor).map(|(a, b)| a + lambda * (b - a)).collect()
}

/// Minority rows needed so that `normal / malicious <= target_ratio`.
pub fn required_minority(normal: usize, target_ratio: f64) -> usize {
    (normal as f64 / target_ratio).ceil() as usize
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Append synthetic positives until the normal/malicious ratio meets the target.
///
/// Fewer than two positive rows leaves the input untouched (with a warning).
/// `k_neighbors` is clamped to the number of positives minus one.
pub fn smote(rows: &[FeatureRow], config: &BalanceConfig, seed: u64) -> Result<Balanced> {
    config.validate()?;
    let minority: Vec<&FeatureRow> = rows.iter().filter(|r| r.label.is_positive()).collect();
    let normal = rows.len() - minority.len();
    let mut warnings = Vec::new();
    let needed = required_minority(normal, config.target_ratio).saturating_sub(minority.len());
    let passthrough = |warnings| Balanced {
        rows: rows.to_vec(),
        synthetic: 0,
        warnings,
    };
    if needed == 0 {
        return Ok(passthrough(warnings));
    }
    if minority.len() < 2 {
        let msg = format!(
            "SMOTE needs at least 2 minority rows, found {}; rows passed through",
            minority.len()
        );
        tracing::warn!("{msg}");
        warnings.push(msg);
        return Ok(passthrough(warnings));
    }

    let k = config.k_neighbors.min(minority.len() - 1);
    let neighbors: Vec<Vec<usize>> = (0..minority.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..minority.len())
                .filter(|&j| j != i)
                .map(|j| (squared_distance(&minority[i].features, &minority[j].features), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rows.to_vec();
    out.reserve(needed);
    for s in 0..needed {
        let base = s % minority.len();
        let nn = neighbors[base][rng.random_range(0..k)];
        let lambda: f64 = rng.random_range(0.0..=1.0);
        let parent = minority[base];
        out.push(FeatureRow {
            vehicle: parent.vehicle,
            t: parent.t,
            features: interpolate(&parent.features, &minority[nn].features, lambda),
            label: Label::Positive,
            synthetic: true,
        });
    }
    Ok(Balanced {
        rows: out,
        synthetic: needed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::VehicleId;

    fn row(features: Vec<f64>, positive: bool) -> FeatureRow {
        FeatureRow {
            vehicle: VehicleId(1),
            t: 0,
            features,
            label: if positive { Label::Positive } else { Label::Negative },
            synthetic: false,
        }
    }

    #[test]
    fn midpoint_interpolation() {
        assert_eq!(interpolate(&[1.0; 10], &[3.0; 10], 0.5), vec![2.0; 10]);
    }

    #[test]
    fn balanced_input_is_untouched() {
        let rows = vec![row(vec![0.0], false), row(vec![1.0], true)];
        let out = smote(&rows, &BalanceConfig::default(), 1).unwrap();
        assert_eq!(out.rows, rows);
        assert_eq!(out.synthetic, 0);
    }

    #[test]
    fn reference_ratio_example() {
        let mut rows: Vec<FeatureRow> = (0..2000).map(|i| row(vec![(i % 13) as f64; 10], false)).collect();
        rows.extend((0..4).map(|i| row(vec![100.0 + i as f64; 10], true)));
        let out = smote(&rows, &BalanceConfig::default(), 9).unwrap();
        assert_eq!(required_minority(2000, 294.12), 7);
        assert_eq!(out.synthetic, 3);
        assert_eq!(&out.rows[..rows.len()], &rows[..]);
        let mal = out.rows.iter().filter(|r| r.label.is_positive()).count();
        assert!(2000.0 / mal as f64 <= 294.12);
    }

    #[test]
    fn too_few_minority_rows_pass_through() {
        let rows = vec![row(vec![0.0], false), row(vec![0.0], false), row(vec![1.0], true)];
        let cfg = BalanceConfig {
            target_ratio: 1.0,
            k_neighbors: 5,
        };
        let out = smote(&rows, &cfg, 0).unwrap();
        assert_eq!(out.rows, rows);
        assert_eq!(out.warnings.len(), 1);
        let none = smote(&rows[..2], &cfg, 0).unwrap();
        assert_eq!(none.rows.len(), 2);
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rows: Vec<FeatureRow> = (0..50).map(|i| row(vec![i as f64, 1.0], false)).collect();
        rows.extend((0..3).map(|i| row(vec![i as f64 * 10.0, 5.0], true)));
        let cfg = BalanceConfig {
            target_ratio: 2.0,
            k_neighbors: 5,
        };
        let a = smote(&rows, &cfg, 4).unwrap();
        assert_eq!(a, smote(&rows, &cfg, 4).unwrap());
        assert_eq!(a.synthetic, 22);
    }
}
