//! Confusion bookkeeping and detection metrics for both tiers.
//!
//! A metric whose denominator is zero is `None` ("undefined"): `null` in JSON,
//! `NA` in CSV, and skipped by [`macro_average`].

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::scenario::GroundTruth;
use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for Confusion {
    type Output = Confusion;
    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dr: Option<f64>,
    pub far: Option<f64>,
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn score(c: &Confusion) -> Metrics {
    let dr = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = match (precision, dr) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Metrics {
        dr,
        far: ratio(c.fp, c.fp + c.tn),
        fnr: ratio(c.fn_, c.tp + c.fn_),
        precision,
        recall: dr,
        f1,
    }
}

/// Mean of each metric over the inputs where it is defined.
pub fn macro_average(items: &[Metrics]) -> Metrics {
    fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
        let defined: Vec<f64> = values.flatten().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
    Metrics {
        dr: mean(items.iter().map(|m| m.dr)),
        far: mean(items.iter().map(|m| m.far)),
        fnr: mean(items.iter().map(|m| m.fnr)),
        precision: mean(items.iter().map(|m| m.precision)),
        recall: mean(items.iter().map(|m| m.recall)),
        f1: mean(items.iter().map(|m| m.f1)),
    }
}

/// One malicious-list decision scored against a population of vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MndRound {
    pub interval: (u64, u64),
    /// Set when the list is one vehicle's local verdict rather than a broadcast.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reporter: Option<VehicleId>,
    pub listed: BTreeSet<VehicleId>,
    /// Vehicles the round is scored over. Listed ids outside it are ignored.
    pub population: BTreeSet<VehicleId>,
}

pub fn round_confusion(round: &MndRound, truth: &GroundTruth) -> Confusion {
    let mut c = Confusion::default();
    for id in &round.population {
        c.record(round.listed.contains(id), truth.is_attacker(*id));
    }
    c
}

/// Sum of per-round confusions.
pub fn mnd_confusion(rounds: &[MndRound], truth: Option<&GroundTruth>) -> Result<Confusion> {
    let truth = truth.ok_or_else(|| Error::Evaluation("malicious node scoring needs ground truth".into()))?;
    Ok(rounds.iter().map(|r| round_confusion(r, truth)).fold(Confusion::default(), Add::add))
}

/// Per-reporter metrics averaged across reporters, for local (non-federated) lists.
pub fn per_reporter_average(rounds: &[MndRound], truth: &GroundTruth) -> Metrics {
    let mut per: BTreeMap<Option<VehicleId>, Confusion> = BTreeMap::new();
    for r in rounds {
        *per.entry(r.reporter).or_default() += round_confusion(r, truth);
    }
    let scored: Vec<Metrics> = per.values().map(score).collect();
    macro_average(&scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetFlag {
    pub vehicle: VehicleId,
    pub t: u64,
    pub attack: bool,
}

/// Fraction of (non-empty) attack windows flagged by any vehicle at the
/// window's first integer second. `None` when there are no windows.
pub fn first_second_rate(flags: &[OnsetFlag], truth: &GroundTruth) -> Option<f64> {
    let flagged: BTreeSet<u64> = flags.iter().filter(|f| f.attack).map(|f| f.t).collect();
    let windows: Vec<u64> = truth
        .attack_windows
        .iter()
        .filter(|w| w.1 > w.0)
        .map(|w| w.0.floor() as u64)
        .collect();
    let hits = windows.iter().filter(|s| flagged.contains(s)).count();
    ratio(hits as u64, windows.len() as u64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub preprocess_s: f64,
    pub onset_train_s: f64,
    pub mnd_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub confusion: Confusion,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub method: String,
    pub mnd_mode: String,
    pub onset: TierReport,
    pub mnd: TierReport,
    pub first_second_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

pub const CSV_HEADER: &str = "scenario,method,mnd_mode,onset_dr,onset_far,onset_fnr,onset_precision,onset_f1,\
first_second_rate,mnd_dr,mnd_far,mnd_fnr,mnd_precision,mnd_f1,preprocess_s,onset_train_s,mnd_s";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let o = &self.onset.metrics;
        let m = &self.mnd.metrics;
        let t = self.timing;
        [
            self.scenario.clone(),
            self.method.clone(),
            self.mnd_mode.clone(),
            cell(o.dr),
            cell(o.far),
            cell(o.fnr),
            cell(o.precision),
            cell(o.f1),
            cell(self.first_second_rate),
            cell(m.dr),
            cell(m.far),
            cell(m.fnr),
            cell(m.precision),
            cell(m.f1),
            cell(t.map(|t| t.preprocess_s)),
            cell(t.map(|t| t.onset_train_s)),
            cell(t.map(|t| t.mnd_s)),
        ]
        .join(",")
    }
}
