//! Server-side aggregation of suspicion reports into the broadcast malicious
//! node list, and the vehicle-side blocklist that consumes it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::mnd::SuspicionReport;
use crate::protocol::Message;
use crate::scenario::PacketEvent;
use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListMode {
    /// The list is rebuilt from scratch every aggregation.
    Stateless,
    /// Listed ids persist until their timer runs out without a new report.
    Stateful,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregation {
    pub listed: BTreeSet<VehicleId>,
    /// Distinct reporters naming each vehicle.
    pub frequencies: BTreeMap<VehicleId, usize>,
    pub warnings: Vec<String>,
}

/// Vehicles named by at least `threshold` distinct reporters.
/// Self-reports are dropped with a warning.
pub fn aggregate_detailed(reports: &[SuspicionReport], threshold: usize) -> Aggregation {
    let mut reporters: BTreeMap<VehicleId, BTreeSet<VehicleId>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for r in reports {
        for &id in &r.suspected {
            if id == r.reporter {
                let msg = format!("vehicle {} reported itself; ignored", r.reporter);
                tracing::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            reporters.entry(id).or_default().insert(r.reporter);
        }
    }
    let frequencies: BTreeMap<VehicleId, usize> = reporters.into_iter().map(|(id, set)| (id, set.len())).collect();
    let listed = frequencies
        .iter()
        .filter(|(_, &f)| f >= threshold.max(1))
        .map(|(&id, _)| id)
        .collect();
    Aggregation {
        listed,
        frequencies,
        warnings,
    }
}

pub fn aggregate(reports: &[SuspicionReport], threshold: usize) -> BTreeSet<VehicleId> {
    aggregate_detailed(reports, threshold).listed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    pub mode: ListMode,
    pub threshold: usize,
    pub timer_duration_s: f64,
    pub frequencies: BTreeMap<VehicleId, usize>,
    pub list: BTreeSet<VehicleId>,
    pub timers: BTreeMap<VehicleId, f64>,
    pub version: u64,
}

impl AggregationState {
    pub fn new(mode: ListMode, threshold: usize, timer_duration_s: f64) -> Result<Self> {
        if threshold == 0 {
            return Err(Error::config("th", "must be >= 1"));
        }
        if !(timer_duration_s.is_finite() && timer_duration_s >= 0.0) {
            return Err(Error::config("timer_duration_s", "must be finite and >= 0"));
        }
        Ok(AggregationState {
            mode,
            threshold,
            timer_duration_s,
            frequencies: BTreeMap::new(),
            list: BTreeSet::new(),
            timers: BTreeMap::new(),
            version: 0,
        })
    }

    /// Fold a freshly aggregated set into the list and return what to broadcast.
    /// Timers expire strictly after `expiry`, so a zero duration keeps exactly
    /// the ids named at this tick.
    pub fn update_list(&mut self, new_set: &BTreeSet<VehicleId>, now_s: f64) -> BTreeSet<VehicleId> {
        self.version += 1;
        match self.mode {
            ListMode::Stateless => {
                self.timers.clear();
                self.list = new_set.clone();
            }
            ListMode::Stateful => {
                for &id in new_set {
                    self.timers.insert(id, now_s + self.timer_duration_s);
                }
                self.timers.retain(|_, &mut expiry| expiry >= now_s);
                self.list = self.timers.keys().copied().collect();
            }
        }
        self.list.clone()
    }

    /// Aggregate reports, update the list, and return the broadcast message.
    pub fn ingest_round(&mut self, reports: &[SuspicionReport], now_s: f64) -> (Aggregation, Message) {
        let agg = aggregate_detailed(reports, self.threshold);
        self.frequencies = agg.frequencies.clone();
        let ids = self.update_list(&agg.listed, now_s);
        (agg, self.broadcast(ids, now_s))
    }

    pub fn broadcast(&self, ids: BTreeSet<VehicleId>, now_s: f64) -> Message {
        broadcast(ids, self.version, self.mode, now_s)
    }

    /// Current list for a vehicle joining after the last broadcast.
    pub fn current(&self, now_s: f64) -> Message {
        self.broadcast(self.list.clone(), now_s)
    }
}

pub fn broadcast(ids: BTreeSet<VehicleId>, version: u64, mode: ListMode, issued_at_s: f64) -> Message {
    Message::MaliciousList {
        version,
        ids,
        mode,
        issued_at_s,
    }
}

/// A vehicle's local blocklist, replaced wholesale by each broadcast.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Blocklist {
    pub ids: BTreeSet<VehicleId>,
    pub version: u64,
    pub blocked: u64,
    pub accepted: u64,
}

impl Blocklist {
    /// Apply a `MALICIOUS_LIST`; other message types are ignored.
    pub fn apply(&mut self, message: &Message) -> bool {
        if let Message::MaliciousList { version, ids, .. } = message {
            self.ids = ids.clone();
            self.version = *version;
            true
        } else {
            false
        }
    }

    /// Whether an inbound packet is processed. Packets from listed ids are counted as blocked.
    pub fn accept(&mut self, event: &PacketEvent) -> bool {
        if self.ids.contains(&event.sender) {
            self.blocked += 1;
            false
        } else {
            self.accepted += 1;
            true
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnd::MadStats;
    use proptest::prelude::*;

    fn report(reporter: u32, ids: &[u32]) -> SuspicionReport {
        SuspicionReport {
            reporter: VehicleId(reporter),
            interval: (0, 10),
            suspected: ids.iter().map(|&i| VehicleId(i)).collect(),
            stats: MadStats {
                median: 0.0,
                mad: 0.0,
                upper_tr: 0.0,
                lower_tr: 0.0,
                low_outliers: BTreeSet::new(),
            },
        }
    }

    fn ids(v: &[u32]) -> BTreeSet<VehicleId> {
        v.iter().map(|&i| VehicleId(i)).collect()
    }

    const A: u32 = 101;
    const B: u32 = 102;
    const C: u32 = 103;

    #[test]
    fn frequency_threshold() {
        let reports = vec![report(1, &[A, B]), report(2, &[A]), report(3, &[A, C])];
        assert_eq!(aggregate(&reports, 2), ids(&[A]));
        assert_eq!(aggregate(&reports, 1), ids(&[A, B, C]));
        assert!(aggregate(&reports, 4).is_empty());
    }

    #[test]
    fn distinct_reporters_only() {
        let reports = vec![report(1, &[A]), report(1, &[A])];
        let agg = aggregate_detailed(&reports, 1);
        assert_eq!(agg.frequencies[&VehicleId(A)], 1);
        assert!(aggregate(&reports, 2).is_empty());
    }

    #[test]
    fn self_reports_are_ignored() {
        let agg = aggregate_detailed(&[report(5, &[5, A])], 1);
        assert_eq!(agg.listed, ids(&[A]));
        assert_eq!(agg.warnings.len(), 1);
    }

    #[test]
    fn stateful_expiry_and_reset() {
        let mut s = AggregationState::new(ListMode::Stateful, 1, 120.0).unwrap();
        assert_eq!(s.update_list(&ids(&[A]), 0.0), ids(&[A]));
        assert!(s.clone().update_list(&ids(&[]), 121.0).is_empty());
        s.update_list(&ids(&[A]), 100.0);
        assert_eq!(s.timers[&VehicleId(A)], 220.0);
        assert_eq!(s.update_list(&ids(&[]), 121.0), ids(&[A]));
    }

    #[test]
    fn stateless_forgets() {
        let mut s = AggregationState::new(ListMode::Stateless, 1, 120.0).unwrap();
        assert_eq!(s.update_list(&ids(&[A]), 0.0), ids(&[A]));
        assert!(s.update_list(&ids(&[]), 10.0).is_empty());
        assert!(s.timers.is_empty());
    }

    #[test]
    fn blocklist_follows_broadcasts() {
        let mut v = Blocklist::default();
        v.apply(&broadcast(ids(&[A]), 1, ListMode::Stateless, 5.0));
        let from_a = PacketEvent {
            time_s: 6.0,
            sender: VehicleId(A),
            receiver: VehicleId(1),
        };
        let from_b = PacketEvent {
            sender: VehicleId(B),
            ..from_a
        };
        assert!(!v.accept(&from_a));
        assert!(v.accept(&from_b));
        assert_eq!((v.blocked, v.accepted), (1, 1));
        v.apply(&broadcast(ids(&[]), 2, ListMode::Stateless, 7.0));
        assert!(v.accept(&from_a));

        // Late joiner gets the current list.
        let mut s = AggregationState::new(ListMode::Stateless, 1, 0.0).unwrap();
        s.ingest_round(&[report(1, &[C])], 10.0);
        let mut late = Blocklist::default();
        late.apply(&s.current(11.0));
        assert_eq!(late.ids, ids(&[C]));
        assert_eq!(late.version, 1);
    }

    fn arb_reports() -> impl Strategy<Value = Vec<SuspicionReport>> {
        prop::collection::vec((1u32..8, prop::collection::btree_set(1u32..12, 0..5)), 0..10).prop_map(|v| {
            v.into_iter()
                .map(|(r, s)| report(r, &s.into_iter().collect::<Vec<_>>()))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn aggregate_properties(mut reports in arb_reports(), extra in arb_reports(), th in 1usize..4) {
            let base = aggregate(&reports, th);
            let union: BTreeSet<VehicleId> = reports
                .iter()
                .flat_map(|r| r.suspected.iter().copied().filter(move |&i| i != r.reporter))
                .collect();
            prop_assert_eq!(aggregate(&reports, 1), union);
            let reporters: BTreeSet<_> = reports.iter().map(|r| r.reporter).collect();
            prop_assert!(aggregate(&reports, reporters.len() + 1).is_empty());

            let mut grown = reports.clone();
            grown.extend(extra);
            prop_assert!(base.is_subset(&aggregate(&grown, th)));

            reports.reverse();
            prop_assert_eq!(aggregate(&reports, th), base);
        }

        #[test]
        fn zero_timer_matches_stateless(ticks in prop::collection::vec(prop::collection::btree_set(1u32..6, 0..4), 1..8)) {
            let mut stateful = AggregationState::new(ListMode::Stateful, 1, 0.0).unwrap();
            let mut stateless = AggregationState::new(ListMode::Stateless, 1, 0.0).unwrap();
            for (i, set) in ticks.iter().enumerate() {
                let set: BTreeSet<VehicleId> = set.iter().map(|&v| VehicleId(v)).collect();
                let now = 10.0 * i as f64;
                prop_assert_eq!(stateful.update_list(&set, now), stateless.update_list(&set, now));
            }
        }
    }
}
