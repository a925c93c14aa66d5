//! Per-vehicle counting: per-second inbound totals, lagged feature rows, and
//! per-sender counts over fixed intervals.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scenario::{GroundTruth, PacketEvent};
use crate::{Error, Result, VehicleId};

/// Number of lagged seconds per feature row.
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSeries {
    pub vehicle: VehicleId,
    /// Second -> inbound packets in `[t, t + 1)`. Missing seconds are zero.
    pub counts: BTreeMap<u64, u64>,
}

impl CountSeries {
    pub fn get(&self, t: u64) -> u64 {
        self.counts.get(&t).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn target(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub vehicle: VehicleId,
    pub t: u64,
    /// `[Count(t), Count(t-1), ..., Count(t-a+1)]`.
    pub features: Vec<f64>,
    pub label: Label,
    #[serde(default)]
    pub synthetic: bool,
}

/// How a row's label is decided.
#[derive(Debug, Clone, Copy)]
pub enum LabelRule<'a> {
    /// Positive whenever an attack window is in progress (the default).
    WallClock,
    /// Positive only if the vehicle also received attacker traffic during that
    /// second. The series holds inbound counts from attackers only.
    RequireAttackTraffic(&'a CountSeries),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMode {
    Normal,
    Alert,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntervalLengths {
    pub normal_s: u64,
    pub alert_s: u64,
}

impl Default for IntervalLengths {
    fn default() -> Self {
        IntervalLengths {
            normal_s: 60,
            alert_s: 10,
        }
    }
}

impl IntervalLengths {
    pub fn for_mode(&self, mode: IntervalMode) -> u64 {
        match mode {
            IntervalMode::Normal => self.normal_s,
            IntervalMode::Alert => self.alert_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborCounts {
    pub vehicle: VehicleId,
    pub interval: (u64, u64),
    pub per_sender: BTreeMap<VehicleId, u64>,
}

impl NeighborCounts {
    pub fn total(&self) -> u64 {
        self.per_sender.values().sum()
    }
}

pub fn build_count_series(events: &[PacketEvent], vehicle: VehicleId) -> CountSeries {
    let mut counts = BTreeMap::new();
    for e in events.iter().filter(|e| e.receiver == vehicle) {
        *counts.entry(e.time_s.floor() as u64).or_insert(0) += 1;
    }
    CountSeries { vehicle, counts }
}

/// Per-second counts of packets a vehicle received from attackers.
pub fn build_attack_series(events: &[PacketEvent], vehicle: VehicleId, truth: &GroundTruth) -> CountSeries {
    let mut counts = BTreeMap::new();
    for e in events
        .iter()
        .filter(|e| e.receiver == vehicle && truth.is_attacker(e.sender))
    {
        *counts.entry(e.time_s.floor() as u64).or_insert(0) += 1;
    }
    CountSeries { vehicle, counts }
}

/// Count series for every vehicle in one pass.
pub fn build_all_count_series(events: &[PacketEvent]) -> BTreeMap<VehicleId, CountSeries> {
    let mut out: BTreeMap<VehicleId, CountSeries> = BTreeMap::new();
    for e in events {
        *out.entry(e.receiver)
            .or_insert_with(|| CountSeries {
                vehicle: e.receiver,
                counts: BTreeMap::new(),
            })
            .counts
            .entry(e.time_s.floor() as u64)
            .or_insert(0) += 1;
    }
    out
}

/// Seconds `[first, last]` for which a vehicle gets a row.
fn row_span(series: &CountSeries, truth: &GroundTruth) -> Option<(u64, u64)> {
    match truth.presence.get(&series.vehicle) {
        Some(&(enter, exit)) if exit > enter => {
            let last = (exit.ceil() as u64).saturating_sub(1);
            Some((enter.floor() as u64, last.max(enter.floor() as u64)))
        }
        Some(_) => None,
        None => {
            let first = *series.counts.keys().next()?;
            let last = *series.counts.keys().next_back()?;
            Some((first, last))
        }
    }
}

pub fn windowize(series: &CountSeries, truth: &GroundTruth, a: usize) -> Vec<FeatureRow> {
    windowize_with(series, truth, a, LabelRule::WallClock)
}

/// One row per second of presence. Lags reaching before the vehicle's first
/// second are zero.
pub fn windowize_with(series: &CountSeries, truth: &GroundTruth, a: usize, rule: LabelRule<'_>) -> Vec<FeatureRow> {
    let a = a.max(1);
    let Some((first, last)) = row_span(series, truth) else {
        return Vec::new();
    };
    (first..=last)
        .map(|t| {
            let features = (0..a as u64)
                .map(|lag| match t.checked_sub(lag) {
                    Some(s) if s >= first => series.get(s) as f64,
                    _ => 0.0,
                })
                .collect();
            let in_window = truth.attack_active(t as f64);
            let positive = match rule {
                LabelRule::WallClock => in_window,
                LabelRule::RequireAttackTraffic(attack) => in_window && attack.get(t) > 0,
            };
            FeatureRow {
                vehicle: series.vehicle,
                t,
                features,
                label: if positive { Label::Positive } else { Label::Negative },
                synthetic: false,
            }
        })
        .collect()
}

/// Per-sender counts over `[start, end)` for packets received by `vehicle`.
/// `events` must be sorted by time.
pub fn neighbor_counts(events: &[PacketEvent], vehicle: VehicleId, start: u64, end: u64) -> NeighborCounts {
    let lo = events.partition_point(|e| e.time_s < start as f64);
    let hi = events.partition_point(|e| e.time_s < end as f64);
    let mut per_sender = BTreeMap::new();
    for e in events[lo..hi].iter().filter(|e| e.receiver == vehicle) {
        *per_sender.entry(e.sender).or_insert(0) += 1;
    }
    NeighborCounts {
        vehicle,
        interval: (start, end),
        per_sender,
    }
}

/// Consecutive non-overlapping intervals anchored at the vehicle's first
/// observed inbound second and running through its last one.
pub fn interval_counts(
    events: &[PacketEvent],
    vehicle: VehicleId,
    mode: IntervalMode,
    lengths: &IntervalLengths,
) -> Vec<NeighborCounts> {
    let len = lengths.for_mode(mode).max(1);
    let mut inbound = events.iter().filter(|e| e.receiver == vehicle);
    let Some(first) = inbound.next() else {
        return Vec::new();
    };
    let anchor = first.time_s.floor() as u64;
    let last = inbound.last().unwrap_or(first).time_s.floor() as u64;
    let mut out = Vec::new();
    let mut start = anchor;
    while start <= last {
        out.push(neighbor_counts(events, vehicle, start, start + len));
        start += len;
    }
    out
}

/// Write rows as `t,f0..f{a-1},label`, adding a `synthetic` column when any
/// row is synthetic.
pub fn write_feature_rows(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let a = rows.first().map_or(DEFAULT_WINDOW, |r| r.features.len());
    let with_synthetic = rows.iter().any(|r| r.synthetic);
    let mut header = String::from("t");
    for i in 0..a {
        header.push_str(&format!(",f{i}"));
    }
    header.push_str(",label");
    if with_synthetic {
        header.push_str(",synthetic");
    }
    writeln!(out, "{header}").map_err(io)?;
    for r in rows {
        let mut line = r.t.to_string();
        for f in &r.features {
            line.push(',');
            line.push_str(&f.to_string());
        }
        line.push_str(if r.label.is_positive() { ",1" } else { ",0" });
        if with_synthetic {
            line.push_str(if r.synthetic { ",1" } else { ",0" });
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate, ScenarioConfig};
    use proptest::prelude::*;

    fn ev(t: f64, s: u32, r: u32) -> PacketEvent {
        PacketEvent {
            time_s: t,
            sender: VehicleId(s),
            receiver: VehicleId(r),
        }
    }

    fn truth_with(windows: Vec<(f64, f64)>, presence: Vec<(u32, f64, f64)>) -> GroundTruth {
        GroundTruth {
            attackers: Default::default(),
            attack_windows: windows,
            presence: presence
                .into_iter()
                .map(|(v, a, b)| (VehicleId(v), (a, b)))
                .collect(),
        }
    }

    #[test]
    fn count_series_floors_to_seconds() {
        let events = vec![ev(1.2, 2, 1), ev(1.9, 3, 1), ev(2.1, 2, 1), ev(2.5, 1, 2)];
        let s = build_count_series(&events, VehicleId(1));
        assert_eq!(s.counts, BTreeMap::from([(1, 2), (2, 1)]));
        assert!(build_count_series(&events, VehicleId(9)).counts.is_empty());
    }

    #[test]
    fn flood_shows_up_as_sustained_counts() {
        let cfg = ScenarioConfig {
            duration_s: 120,
            total_vehicles: 2,
            concurrent_range: (2, 2),
            arrival_interval_s: 1000.0,
            attacker_fraction: 0.5,
            attack_count: 1,
            attack_spacing_s: 60,
            attack_duration_s: 25,
            first_attack_s: Some(40),
            normal_rate_pps: 0.0,
            flood_rate_pps: 100.0,
            neighbor_degree: 1.0,
            min_attackers_per_window: 0,
            rng_seed: 3,
        };
        let (events, truth) = generate(&cfg).unwrap();
        let attacker = *truth.attackers.iter().next().unwrap();
        let victim = *truth.presence.keys().find(|v| **v != attacker).unwrap();
        let series = build_count_series(&events, victim);
        // Oracle: direct tally of the generated events.
        for t in 40..65u64 {
            let tally = events
                .iter()
                .filter(|e| e.receiver == victim && e.time_s >= t as f64 && e.time_s < (t + 1) as f64)
                .count() as u64;
            assert_eq!(series.get(t), tally);
            assert!((60..=140).contains(&tally), "t={t} count={tally}");
        }
        assert_eq!(series.counts.len(), 25);
    }

    #[test]
    fn windowize_structure_and_labels() {
        let counts: BTreeMap<u64, u64> = (1..=12).map(|t| (t, t * 10)).collect();
        let series = CountSeries {
            vehicle: VehicleId(1),
            counts,
        };
        let truth = truth_with(vec![(11.0, 12.0)], vec![(1, 1.0, 13.0)]);
        let rows = windowize(&series, &truth, 10);
        assert_eq!(rows.len(), 12);
        let r10 = rows.iter().find(|r| r.t == 10).unwrap();
        let expect: Vec<f64> = (1..=10).rev().map(|t| (t * 10) as f64).collect();
        assert_eq!(r10.features, expect);
        assert_eq!(r10.label, Label::Negative);
        assert_eq!(rows.iter().find(|r| r.t == 11).unwrap().label, Label::Positive);
        assert_eq!(rows.iter().find(|r| r.t == 12).unwrap().label, Label::Negative);
        // First row: one observed second, nine zero-padded lags.
        assert_eq!(rows[0].features, {
            let mut v = vec![0.0; 10];
            v[0] = 10.0;
            v
        });

        let single = windowize(&series, &truth, 1);
        assert_eq!(single.len(), 12);
        assert!(single.iter().all(|r| r.features == vec![(r.t * 10) as f64]));
    }

    #[test]
    fn attack_traffic_rule_needs_attacker_packets() {
        let series = CountSeries {
            vehicle: VehicleId(1),
            counts: BTreeMap::from([(5, 3), (6, 3)]),
        };
        let attack = CountSeries {
            vehicle: VehicleId(1),
            counts: BTreeMap::from([(6, 2)]),
        };
        let truth = truth_with(vec![(5.0, 7.0)], vec![(1, 5.0, 7.0)]);
        let rows = windowize_with(&series, &truth, 3, LabelRule::RequireAttackTraffic(&attack));
        let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![Label::Negative, Label::Positive]);
    }

    #[test]
    fn interval_modes() {
        let events: Vec<PacketEvent> = (0..60).map(|t| ev(t as f64 + 0.5, 2, 1)).collect();
        let lens = IntervalLengths::default();
        assert_eq!(interval_counts(&events, VehicleId(1), IntervalMode::Normal, &lens).len(), 1);
        let alert = interval_counts(&events, VehicleId(1), IntervalMode::Alert, &lens);
        assert_eq!(alert.len(), 6);
        assert_eq!(alert[0].interval, (0, 10));

        let burst: Vec<PacketEvent> = (0..5).map(|i| ev(i as f64, 7, 1)).collect();
        let alert = interval_counts(&burst, VehicleId(1), IntervalMode::Alert, &lens);
        assert_eq!(alert[0].per_sender[&VehicleId(7)], 5);
    }

    #[test]
    fn csv_export_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v1.csv");
        let rows = vec![FeatureRow {
            vehicle: VehicleId(1),
            t: 4,
            features: vec![1.0, 2.0],
            label: Label::Positive,
            synthetic: false,
        }];
        write_feature_rows(&path, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "t,f0,f1,label\n4,1,2,1\n");
    }

    fn arb_events() -> impl Strategy<Value = Vec<PacketEvent>> {
        prop::collection::vec((0.0f64..200.0, 1u32..6, 1u32..6), 0..400).prop_map(|v| {
            let mut evs: Vec<PacketEvent> = v
                .into_iter()
                .filter(|(_, s, r)| s != r)
                .map(|(t, s, r)| ev(t, s, r))
                .collect();
            evs.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
            evs
        })
    }

    proptest! {
        #[test]
        fn no_event_lost_or_double_counted(events in arb_events(), a in 1usize..12) {
            let truth = truth_with(vec![(50.0, 75.0)], vec![(1, 0.0, 200.0)]);
            let series = build_count_series(&events, VehicleId(1));
            let rows = windowize(&series, &truth, a);
            let inbound = events.iter().filter(|e| e.receiver == VehicleId(1)).count() as f64;
            let first_sum: f64 = rows.iter().map(|r| r.features[0]).sum();
            prop_assert_eq!(first_sum, inbound);
            for pair in rows.windows(2) {
                prop_assert_eq!(&pair[1].features[1..], &pair[0].features[..a - 1]);
            }
        }

        #[test]
        fn interval_totals_match_series(events in arb_events(), alert in any::<bool>()) {
            let mode = if alert { IntervalMode::Alert } else { IntervalMode::Normal };
            let intervals = interval_counts(&events, VehicleId(1), mode, &IntervalLengths::default());
            let series = build_count_series(&events, VehicleId(1));
            let total: u64 = intervals.iter().map(NeighborCounts::total).sum();
            prop_assert_eq!(total, series.total());
            for pair in intervals.windows(2) {
                prop_assert_eq!(pair[0].interval.1, pair[1].interval.0);
            }
        }
    }
}
