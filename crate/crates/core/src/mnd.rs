//! Median-absolute-deviation thresholds over per-neighbor inbound counts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::preprocess::NeighborCounts;
use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MadParams {
    /// Consistency constant for normally distributed data.
    pub b: f64,
    /// Exclusion criterion: half-width of the band in MAD units.
    pub ce: f64,
}

impl Default for MadParams {
    fn default() -> Self {
        MadParams { b: 1.4826, ce: 3.0 }
    }
}

impl MadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::config("b", "must be > 0"));
        }
        if !(self.ce > 0.0) {
            return Err(Error::config("ce", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadStats {
    #[serde(rename = "M")]
    pub median: f64,
    pub mad: f64,
    pub upper_tr: f64,
    pub lower_tr: f64,
    /// Senders below the lower bound. Recorded, never suspected.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub low_outliers: BTreeSet<VehicleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspicionReport {
    pub reporter: VehicleId,
    pub interval: (u64, u64),
    pub suspected: BTreeSet<VehicleId>,
    pub stats: MadStats,
}

/// Median; even-length inputs average the two central order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// `b * median(|x_i - median(x)|)`.
pub fn mad(values: &[f64], b: f64) -> Result<f64> {
    let m = median(values)?;
    let devs: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    Ok(b * median(&devs)?)
}

/// `(M - ce * MAD, M + ce * MAD)`.
pub fn rejection_bounds(values: &[f64], params: &MadParams) -> Result<(f64, f64)> {
    let m = median(values)?;
    let spread = params.ce * mad(values, params.b)?;
    Ok((m - spread, m + spread))
}

/// Flag senders whose count strictly exceeds the upper rejection bound.
/// With fewer than two senders nothing is flagged.
pub fn detect(counts: &NeighborCounts, params: &MadParams) -> SuspicionReport {
    let values: Vec<f64> = counts.per_sender.values().map(|&c| c as f64).collect();
    let (median, mad, upper_tr, lower_tr) = match median_and_mad(&values, params) {
        Some(s) => s,
        None => (0.0, 0.0, 0.0, 0.0),
    };
    let mut suspected = BTreeSet::new();
    let mut low_outliers = BTreeSet::new();
    if values.len() >= 2 {
        for (&sender, &c) in &counts.per_sender {
            if sender == counts.vehicle {
                continue;
            }
            let c = c as f64;
            if c > upper_tr {
                suspected.insert(sender);
            } else if c < lower_tr {
                low_outliers.insert(sender);
            }
        }
    }
    SuspicionReport {
        reporter: counts.vehicle,
        interval: counts.interval,
        suspected,
        stats: MadStats {
            median,
            mad,
            upper_tr,
            lower_tr,
            low_outliers,
        },
    }
}

fn median_and_mad(values: &[f64], params: &MadParams) -> Option<(f64, f64, f64, f64)> {
    let m = median(values).ok()?;
    let d = mad(values, params.b).ok()?;
    Some((m, d, m + params.ce * d, m - params.ce * d))
}
