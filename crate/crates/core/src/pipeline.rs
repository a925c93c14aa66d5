//! End-to-end runs: load a scenario, preprocess every vehicle, train the onset
//! detector under one of three methods, run malicious node detection over the
//! evaluation period, and write the report artifacts.
//!
//! Output directory layout after [`run`]:
//!
//! ```text
//! manifest.json         resolved manifest
//! eval_truth.json       ground truth restricted to the evaluation period
//! onset_decisions.csv   vehicle,t,label,probability,attack
//! mnd_rounds.jsonl      one scored list decision per line
//! messages.jsonl        ONSET_CONFIRMED and MALICIOUS_LIST broadcasts
//! report.json / .csv    metrics
//! timing.json           wall-clock stages (kept out of report.json)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::balance::{self, BalanceConfig};
use crate::fed_mnd::{AggregationState, ListMode};
use crate::fed_onset::{self, classify, FedConfig, OnsetClient, OnsetServer};
use crate::gbdt::{self, GbdtConfig};
use crate::head::HeadConfig;
use crate::metrics::{self, Confusion, EvalReport, MndRound, OnsetFlag, TierReport, Timing};
use crate::mnd::{self, MadParams};
use crate::preprocess::{self, CountSeries, FeatureRow, IntervalLengths, Label, LabelRule};
use crate::protocol::{self, LineQueue, Message};
use crate::scenario::{self, GroundTruth, PacketEvent, ScenarioConfig};
use crate::{Error, Result, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Centralized,
    Federated,
    FederatedSmote,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Centralized, Method::Federated, Method::FederatedSmote];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Centralized => "centralized",
            Method::Federated => "federated",
            Method::FederatedSmote => "federated_smote",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}; expected centralized, federated or federated_smote")))
    }
}

/// How suspicion reports become a malicious list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MndMode {
    /// Each vehicle acts on its own MAD verdict.
    LocalMad,
    /// Server lists every vehicle named by at least one reporter.
    FlAggregate,
    /// Server lists vehicles named by at least TH distinct reporters.
    FlThreshold(usize),
}

impl MndMode {
    pub fn threshold(self) -> Option<usize> {
        match self {
            MndMode::LocalMad => None,
            MndMode::FlAggregate => Some(1),
            MndMode::FlThreshold(th) => Some(th),
        }
    }
}

impl fmt::Display for MndMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MndMode::LocalMad => f.write_str("local_mad"),
            MndMode::FlAggregate => f.write_str("fl_aggregate"),
            MndMode::FlThreshold(th) => write!(f, "fl_threshold({th})"),
        }
    }
}

impl FromStr for MndMode {
    type Err = Error;
    /// Accepts `local_mad`, `fl_aggregate`, `fl_threshold(N)` and `fl_threshold:N`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::config(
                "mnd_mode",
                format!("unknown mode {s:?}; expected local_mad, fl_aggregate or fl_threshold(N)"),
            )
        };
        match s {
            "local_mad" => Ok(MndMode::LocalMad),
            "fl_aggregate" => Ok(MndMode::FlAggregate),
            _ => {
                let rest = s.strip_prefix("fl_threshold").ok_or_else(bad)?;
                let digits = rest
                    .strip_prefix('(')
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| rest.strip_prefix(':'))
                    .ok_or_else(bad)?;
                let th: usize = digits.trim().parse().map_err(|_| bad())?;
                if th == 0 {
                    return Err(Error::config("th", "must be >= 1"));
                }
                Ok(MndMode::FlThreshold(th))
            }
        }
    }
}

impl Serialize for MndMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MndMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Positive whenever an attack window is active.
    #[default]
    WallClock,
    /// Positive only if the vehicle also received attacker traffic that second.
    RequireAttackTraffic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MndConfig {
    pub mad: MadParams,
    pub intervals: IntervalLengths,
    pub list_mode: ListMode,
    pub list_timer_s: f64,
    /// Alert-mode intervals run after each confirmed onset.
    pub alert_intervals: u32,
}

impl Default for MndConfig {
    fn default() -> Self {
        MndConfig {
            mad: MadParams::default(),
            intervals: IntervalLengths::default(),
            list_mode: ListMode::Stateless,
            list_timer_s: 120.0,
            alert_intervals: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub scenario_path: PathBuf,
    /// When set, the detector is trained on this scenario and evaluated on
    /// every second of `scenario_path` instead of a chronological split.
    pub train_scenario_path: Option<PathBuf>,
    pub method: Method,
    pub mnd_mode: MndMode,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub window: usize,
    pub label_mode: LabelMode,
    pub train_fraction: f64,
    pub gbdt: GbdtConfig,
    pub head: HeadConfig,
    pub fed: FedConfig,
    pub balance: BalanceConfig,
    pub mnd: MndConfig,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            scenario_path: PathBuf::new(),
            train_scenario_path: None,
            method: Method::Centralized,
            mnd_mode: MndMode::FlAggregate,
            output_dir: PathBuf::from("out"),
            seed: 0,
            window: preprocess::DEFAULT_WINDOW,
            label_mode: LabelMode::WallClock,
            train_fraction: 0.7,
            gbdt: GbdtConfig::default(),
            head: HeadConfig::default(),
            fed: FedConfig::default(),
            balance: BalanceConfig::default(),
            mnd: MndConfig::default(),
        }
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario_path.as_os_str().is_empty() {
            return Err(Error::config("scenario_path", "is required"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must be in (0, 1)"));
        }
        if let Some(0) = self.mnd_mode.threshold() {
            return Err(Error::config("th", "must be >= 1"));
        }
        if self.mnd.alert_intervals == 0 && self.mnd.intervals.normal_s == 0 {
            return Err(Error::config("mnd.intervals", "no detection rounds would run"));
        }
        self.gbdt.validate()?;
        self.head.validate()?;
        self.fed.validate()?;
        self.balance.validate()?;
        self.mnd.mad.validate()?;
        Ok(())
    }

    pub fn scenario_name(&self) -> String {
        scenario_name(&self.scenario_path)
    }
}

pub fn scenario_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Generate a scenario and write the event log plus its truth sidecar.
pub fn generate_to(config: &ScenarioConfig, path: &Path) -> Result<(usize, PathBuf)> {
    let (events, truth) = scenario::generate(config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    scenario::write_event_log(path, &events, Some(&truth))?;
    let sidecar = scenario::truth_sidecar_path(path);
    scenario::write_truth(&sidecar, &truth)?;
    Ok((events.len(), sidecar))
}

/// Events plus ground truth, preferring the JSON sidecar over annotations.
pub fn load_scenario(path: &Path) -> Result<(Vec<PacketEvent>, GroundTruth)> {
    let (events, annotated) = scenario::ingest(path)?;
    let sidecar = scenario::truth_sidecar_path(path);
    let truth = if sidecar.exists() {
        scenario::read_truth(&sidecar)?
    } else {
        annotated.ok_or_else(|| {
            Error::Evaluation(format!(
                "{} has no ground truth (no sidecar and no annotation columns)",
                path.display()
            ))
        })?
    };
    Ok((events, truth))
}

/// Feature rows for every vehicle, ordered by (vehicle, t).
pub fn feature_rows(events: &[PacketEvent], truth: &GroundTruth, window: usize, mode: LabelMode) -> Vec<FeatureRow> {
    let mut series = preprocess::build_all_count_series(events);
    for &v in truth.presence.keys() {
        series.entry(v).or_insert_with(|| CountSeries {
            vehicle: v,
            counts: BTreeMap::new(),
        });
    }
    let series: Vec<CountSeries> = series.into_values().collect();
    series
        .par_iter()
        .map(|s| match mode {
            LabelMode::WallClock => preprocess::windowize(s, truth, window),
            LabelMode::RequireAttackTraffic => {
                let attack = preprocess::build_attack_series(events, s.vehicle, truth);
                preprocess::windowize_with(s, truth, window, LabelRule::RequireAttackTraffic(&attack))
            }
        })
        .collect::<Vec<_>>()
        .concat()
}

/// Write one feature CSV per vehicle (`vehicle_<id>.csv`); returns files written.
pub fn preprocess_to(scenario_path: &Path, out_dir: &Path, window: usize, mode: LabelMode) -> Result<usize> {
    let (events, truth) = load_scenario(scenario_path)?;
    let rows = feature_rows(&events, &truth, window, mode);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut by_vehicle: BTreeMap<VehicleId, Vec<FeatureRow>> = BTreeMap::new();
    for r in rows {
        by_vehicle.entry(r.vehicle).or_default().push(r);
    }
    for (v, rows) in &by_vehicle {
        preprocess::write_feature_rows(&out_dir.join(format!("vehicle_{}.csv", v.0)), rows)?;
    }
    Ok(by_vehicle.len())
}

/// Split second for a chronological train/test split. A split that would cut
/// an attack window is moved to that window's end.
pub fn split_second(truth: &GroundTruth, train_fraction: f64) -> u64 {
    let mut split = (truth.horizon() * train_fraction).floor();
    for &(s, e) in &truth.attack_windows {
        if s < split && split < e {
            split = e.ceil();
        }
    }
    split as u64
}

/// Truth with attack windows limited to those starting at or after `start`.
pub fn truth_from(truth: &GroundTruth, start: u64) -> GroundTruth {
    let mut t = truth.clone();
    t.attack_windows.retain(|w| w.0 >= start as f64);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub vehicle: VehicleId,
    pub t: u64,
    pub label: Label,
    pub probability: f64,
    pub attack: bool,
}

/// A trained onset detector of either kind.
pub enum Detector {
    Central(gbdt::LocalEnsemble),
    Federated(Box<fed_onset::GlobalModel>),
}

impl Detector {
    pub fn probability(&self, features: &[f64]) -> Result<f64> {
        match self {
            Detector::Central(e) => e.predict_proba(features),
            Detector::Federated(m) => m.probability(features),
        }
    }
}

/// Federated clients: vehicles whose training rows contain both classes.
/// Everyone else only receives the model.
fn federated_clients(rows: &[FeatureRow], m: &RunManifest) -> Result<Vec<OnsetClient>> {
    let mut by_vehicle: BTreeMap<VehicleId, Vec<FeatureRow>> = BTreeMap::new();
    for r in rows {
        by_vehicle.entry(r.vehicle).or_default().push(r.clone());
    }
    let eligible: Vec<(VehicleId, Vec<FeatureRow>)> = by_vehicle
        .into_iter()
        .filter(|(_, rows)| rows.iter().any(|r| r.label.is_positive()) && rows.iter().any(|r| !r.label.is_positive()))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Domain("no vehicle has both normal and attack rows to train on".into()));
    }
    let head = HeadConfig {
        rng_seed: m.head.rng_seed ^ m.seed,
        ..m.head.clone()
    };
    eligible
        .into_par_iter()
        .map(|(v, rows)| {
            let rows = if m.method == Method::FederatedSmote {
                balance::smote(&rows, &m.balance, m.seed ^ (u64::from(v.0) << 32))?.rows
            } else {
                rows
            };
            Ok(OnsetClient::new(v, rows, m.gbdt.clone(), head.clone()))
        })
        .collect()
}

/// Train the onset detector for `m.method` on `rows`.
pub fn train_detector(rows: &[FeatureRow], m: &RunManifest) -> Result<Detector> {
    match m.method {
        Method::Centralized => Ok(Detector::Central(gbdt::train(VehicleId::SERVER, rows, &m.gbdt)?)),
        Method::Federated | Method::FederatedSmote => {
            let mut clients = federated_clients(rows, m)?;
            let head = HeadConfig {
                rng_seed: m.head.rng_seed ^ m.seed,
                ..m.head.clone()
            };
            let mut server = OnsetServer::new(m.fed.clone(), head)?;
            let outcome = fed_onset::run_training(&mut clients, &mut server)?;
            tracing::info!(
                clients = clients.len(),
                fedavg_calls = outcome.fedavg_calls,
                bytes = outcome.bytes_exchanged,
                "federated training finished"
            );
            Ok(Detector::Federated(Box::new(outcome.model)))
        }
    }
}

/// Shared-clock detection rounds over `[start, end)`: normal-length rounds
/// throughout, plus alert-length rounds after every confirmed onset.
fn schedule_rounds(
    start: u64,
    end: u64,
    confirmations: &[u64],
    cfg: &MndConfig,
) -> Vec<(u64, u64)> {
    let mut rounds = BTreeSet::new();
    let normal = cfg.intervals.normal_s;
    if normal > 0 {
        let mut s = start;
        while s + normal <= end {
            rounds.insert((s + normal, s));
            s += normal;
        }
    }
    let alert = cfg.intervals.alert_s.max(1);
    let mut alert_until = 0;
    for &t in confirmations {
        if t < alert_until {
            continue;
        }
        for i in 0..u64::from(cfg.alert_intervals) {
            let s = t + i * alert;
            if s + alert <= end {
                rounds.insert((s + alert, s));
            }
        }
        alert_until = t + u64::from(cfg.alert_intervals) * alert;
    }
    rounds.into_iter().map(|(e, s)| (s, e)).collect()
}

/// Vehicles scored in a round: present for the whole interval; attackers only
/// count while an attack is underway.
fn round_population(truth: &GroundTruth, start: u64, end: u64) -> BTreeSet<VehicleId> {
    let attacking = truth.attack_overlaps(start as f64, end as f64);
    truth
        .presence
        .keys()
        .copied()
        .filter(|&v| truth.present_throughout(v, start as f64, end as f64))
        .filter(|&v| attacking || !truth.is_attacker(v))
        .collect()
}

struct MndOutcome {
    rounds: Vec<MndRound>,
    broadcasts: Vec<Message>,
}

fn run_mnd(
    events: &[PacketEvent],
    truth: &GroundTruth,
    span: (u64, u64),
    confirmations: &[u64],
    m: &RunManifest,
) -> Result<MndOutcome> {
    let mut state = match m.mnd_mode.threshold() {
        Some(th) => Some(AggregationState::new(m.mnd.list_mode, th, m.mnd.list_timer_s)?),
        None => None,
    };
    let mut uplink = LineQueue::new();
    let mut rounds = Vec::new();
    let mut broadcasts = Vec::new();
    for (start, end) in schedule_rounds(span.0, span.1, confirmations, &m.mnd) {
        let population = round_population(truth, start, end);
        let reporters: Vec<VehicleId> = truth
            .presence
            .keys()
            .copied()
            .filter(|&v| truth.present_throughout(v, start as f64, end as f64))
            .collect();
        let reports: Vec<mnd::SuspicionReport> = reporters
            .par_iter()
            .map(|&v| mnd::detect(&preprocess::neighbor_counts(events, v, start, end), &m.mnd.mad))
            .collect();
        match state.as_mut() {
            None => {
                for r in reports {
                    let mut pop = population.clone();
                    pop.remove(&r.reporter);
                    rounds.push(MndRound {
                        interval: (start, end),
                        reporter: Some(r.reporter),
                        listed: r.suspected,
                        population: pop,
                    });
                }
            }
            Some(state) => {
                for r in reports {
                    uplink.send(&Message::SuspicionReport {
                        cid: r.reporter,
                        round: rounds.len() as u32,
                        model_version: state.version,
                        report: r,
                    })?;
                }
                let received: Vec<mnd::SuspicionReport> = uplink
                    .drain()?
                    .into_iter()
                    .filter_map(|msg| match msg {
                        Message::SuspicionReport { report, .. } => Some(report),
                        _ => None,
                    })
                    .collect();
                let (_, msg) = state.ingest_round(&received, end as f64);
                let Message::MaliciousList { ids, .. } = &msg else {
                    unreachable!("aggregation always yields a malicious list")
                };
                rounds.push(MndRound {
                    interval: (start, end),
                    reporter: None,
                    listed: ids.clone(),
                    population,
                });
                broadcasts.push(msg);
            }
        }
    }
    Ok(MndOutcome { rounds, broadcasts })
}

/// Metadata needed to re-score a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario: String,
    pub method: Method,
    pub mnd_mode: MndMode,
    pub eval_start_s: u64,
}

/// Score decisions and rounds. Local lists are macro-averaged per reporter;
/// server lists are scored on the summed confusion.
pub fn build_report(
    meta: &RunMeta,
    decisions: &[Decision],
    rounds: &[MndRound],
    truth: &GroundTruth,
) -> Result<EvalReport> {
    let mut onset = Confusion::default();
    for d in decisions {
        onset.record(d.attack, d.label.is_positive());
    }
    let flags: Vec<OnsetFlag> = decisions
        .iter()
        .map(|d| OnsetFlag {
            vehicle: d.vehicle,
            t: d.t,
            attack: d.attack,
        })
        .collect();
    let mnd_conf = metrics::mnd_confusion(rounds, Some(truth))?;
    let mnd_metrics = match meta.mnd_mode {
        MndMode::LocalMad => metrics::per_reporter_average(rounds, truth),
        _ => metrics::score(&mnd_conf),
    };
    Ok(EvalReport {
        scenario: meta.scenario.clone(),
        method: meta.method.to_string(),
        mnd_mode: meta.mnd_mode.to_string(),
        onset: TierReport {
            confusion: onset,
            metrics: metrics::score(&onset),
        },
        mnd: TierReport {
            confusion: mnd_conf,
            metrics: mnd_metrics,
        },
        first_second_rate: metrics::first_second_rate(&flags, truth),
        timing: None,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub timing: Timing,
    pub output_dir: PathBuf,
}

pub fn run(manifest: &RunManifest) -> Result<RunOutcome> {
    manifest.validate()?;
    let m = manifest;
    let (events, truth) = load_scenario(&m.scenario_path)?;

    let t0 = Instant::now();
    let rows = feature_rows(&events, &truth, m.window, m.label_mode);
    let (train_rows, eval_start) = match &m.train_scenario_path {
        Some(p) => {
            let (tev, ttruth) = load_scenario(p)?;
            (feature_rows(&tev, &ttruth, m.window, m.label_mode), 0)
        }
        None => {
            let split = split_second(&truth, m.train_fraction);
            (rows.iter().filter(|r| r.t < split).cloned().collect(), split)
        }
    };
    let preprocess_s = t0.elapsed().as_secs_f64();
    let eval_rows: Vec<&FeatureRow> = rows.iter().filter(|r| r.t >= eval_start).collect();
    if train_rows.is_empty() || eval_rows.is_empty() {
        return Err(Error::Domain(format!(
            "empty split: {} training rows, {} evaluation rows",
            train_rows.len(),
            eval_rows.len()
        )));
    }
    tracing::info!(train = train_rows.len(), eval = eval_rows.len(), eval_start, "preprocessed");

    let t1 = Instant::now();
    let detector = train_detector(&train_rows, m)?;
    let onset_train_s = t1.elapsed().as_secs_f64();

    let decisions: Vec<Decision> = eval_rows
        .par_iter()
        .map(|r| {
            let p = detector.probability(&r.features)?;
            Ok(Decision {
                vehicle: r.vehicle,
                t: r.t,
                label: r.label,
                probability: p,
                attack: classify(p) == fed_onset::Onset::Attack,
            })
        })
        .collect::<Result<_>>()?;

    let t2 = Instant::now();
    let eval_truth = truth_from(&truth, eval_start);
    let (confirmations, confirm_msgs) = confirm_onsets(&decisions, m)?;
    let horizon = truth.horizon().ceil() as u64;
    let mnd = run_mnd(&events, &eval_truth, (eval_start, horizon), &confirmations, m)?;
    let mnd_s = t2.elapsed().as_secs_f64();

    let meta = RunMeta {
        scenario: m.scenario_name(),
        method: m.method,
        mnd_mode: m.mnd_mode,
        eval_start_s: eval_start,
    };
    let report = build_report(&meta, &decisions, &mnd.rounds, &eval_truth)?;
    let timing = Timing {
        preprocess_s,
        onset_train_s,
        mnd_s,
    };

    let dir = &m.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("manifest.json"), m)?;
    write_json(&dir.join("run_meta.json"), &meta)?;
    write_json(&dir.join("eval_truth.json"), &eval_truth)?;
    write_decisions(&dir.join("onset_decisions.csv"), &decisions)?;
    write_lines(&dir.join("mnd_rounds.jsonl"), &mnd.rounds)?;
    let mut messages = confirm_msgs;
    messages.extend(mnd.broadcasts);
    let path = dir.join("messages.jsonl");
    protocol::write_jsonl(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), &messages)?;
    write_report(dir, &report)?;
    write_json(&dir.join("timing.json"), &timing)?;
    Ok(RunOutcome {
        report,
        timing,
        output_dir: dir.clone(),
    })
}

/// Feed per-second onset flags to the quorum check; returns confirmation
/// seconds and the ONSET_CONFIRMED broadcasts.
fn confirm_onsets(decisions: &[Decision], m: &RunManifest) -> Result<(Vec<u64>, Vec<Message>)> {
    let mut server = OnsetServer::new(m.fed.clone(), m.head.clone())?;
    let mut flagged: Vec<(u64, VehicleId)> = decisions.iter().filter(|d| d.attack).map(|d| (d.t, d.vehicle)).collect();
    flagged.sort_unstable();
    let mut seconds = Vec::new();
    let mut msgs = Vec::new();
    for (t, v) in flagged {
        let report = Message::OnsetReport {
            cid: v,
            round: 0,
            model_version: 0,
            time_s: t as f64,
        };
        for out in server.handle(report)? {
            if seconds.last() != Some(&t) {
                seconds.push(t);
            }
            msgs.push(out);
        }
    }
    Ok((seconds, msgs))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_decisions(path: &Path, decisions: &[Decision]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for d in decisions {
        w.serialize(d)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_decisions(path: &Path) -> Result<Vec<Decision>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|d| d.map_err(Error::from)).collect()
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let csv = format!("{}\n{}\n", metrics::CSV_HEADER, report.csv_row());
    let path = dir.join("report.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// Recompute and rewrite the report of a finished run from its decision and
/// round artifacts.
pub fn evaluate(dir: &Path) -> Result<EvalReport> {
    if !dir.is_dir() {
        return Err(Error::Evaluation(format!("{} is not a run directory", dir.display())));
    }
    let meta: RunMeta = read_json(&dir.join("run_meta.json"))?;
    let truth: GroundTruth = read_json(&dir.join("eval_truth.json"))?;
    let decisions = read_decisions(&dir.join("onset_decisions.csv"))?;
    let rounds: Vec<MndRound> = read_lines(&dir.join("mnd_rounds.jsonl"))?;
    let report = build_report(&meta, &decisions, &rounds, &truth)?;
    write_report(dir, &report)?;
    Ok(report)
}

/// Reports under `dir` (the directory itself and its immediate children),
/// sorted by (scenario, method, mnd_mode).
pub fn collect_reports(dir: &Path) -> Result<Vec<(EvalReport, Option<Timing>)>> {
    if !dir.is_dir() {
        return Err(Error::Evaluation(format!("{} is not a directory", dir.display())));
    }
    let mut candidates = vec![dir.to_path_buf()];
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    candidates.extend(children);
    let mut out = Vec::new();
    for c in candidates {
        let path = c.join("report.json");
        if !path.is_file() {
            continue;
        }
        let report: EvalReport = read_json(&path)?;
        let timing_path = c.join("timing.json");
        let timing = if timing_path.is_file() {
            Some(read_json(&timing_path)?)
        } else {
            None
        };
        out.push((report, timing));
    }
    if out.is_empty() {
        return Err(Error::Evaluation(format!("no report.json found under {}", dir.display())));
    }
    out.sort_by(|a, b| {
        (&a.0.scenario, method_rank(&a.0.method), &a.0.mnd_mode).cmp(&(&b.0.scenario, method_rank(&b.0.method), &b.0.mnd_mode))
    });
    Ok(out)
}

fn method_rank(method: &str) -> (usize, &str) {
    let rank = Method::ALL
        .iter()
        .position(|m| m.as_str() == method)
        .unwrap_or(Method::ALL.len());
    (rank, method)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub csv: String,
    pub table: String,
    pub rows: usize,
}

/// Comparison table across runs: `comparison.csv` is written into `dir`.
pub fn report(dir: &Path) -> Result<Comparison> {
    let reports = collect_reports(dir)?;
    let mut csv = String::from(metrics::CSV_HEADER);
    csv.push('\n');
    for (r, t) in &reports {
        let with_timing = EvalReport {
            timing: *t,
            ..r.clone()
        };
        csv.push_str(&with_timing.csv_row());
        csv.push('\n');
    }
    let path = dir.join("comparison.csv");
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;

    let pct = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{:.2}", 100.0 * x));
    let secs = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"));
    let header = [
        "scenario", "method", "mnd_mode", "DR%", "FAR%", "FNR%", "F1%", "1st-s%", "MND DR%", "MND FAR%", "MND F1%",
        "prep s", "onset s", "mnd s",
    ];
    let body: Vec<Vec<String>> = reports
        .iter()
        .map(|(r, t)| {
            let o = &r.onset.metrics;
            let n = &r.mnd.metrics;
            vec![
                r.scenario.clone(),
                r.method.clone(),
                r.mnd_mode.clone(),
                pct(o.dr),
                pct(o.far),
                pct(o.fnr),
                pct(o.f1),
                pct(r.first_second_rate),
                pct(n.dr),
                pct(n.far),
                pct(n.f1),
                secs(t.map(|t| t.preprocess_s)),
                secs(t.map(|t| t.onset_train_s)),
                secs(t.map(|t| t.mnd_s)),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|row| row[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut table = fmt_row(header.iter().map(|s| s.to_string()).collect());
    table.push('\n');
    for row in body {
        table.push_str(&fmt_row(row));
        table.push('\n');
    }
    Ok(Comparison {
        csv,
        table,
        rows: reports.len(),
    })
}
