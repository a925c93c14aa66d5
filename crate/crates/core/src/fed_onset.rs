//! Federated attack-onset protocol.
//!
//! Round 0: every client trains a local tree ensemble and uploads it with its
//! CID; the server sorts the ensembles by CID, initializes the convolutional
//! head for K clients, and broadcasts both. The ensembles are frozen from then
//! on. Rounds 1..R-1: clients train the head locally and the server averages
//! the updates weighted by sample count.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gbdt::{self, uniform_tree_count, GbdtConfig, LocalEnsemble};
use crate::head::{self, HeadConfig, HeadWeights};
use crate::preprocess::FeatureRow;
use crate::protocol::{LineQueue, Message};
use crate::{ClientId, Error, Result, VehicleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum UpdatePolicy {
    StaticInterval { seconds: f64 },
    NewNodeThreshold { joins: u64 },
    AttackCountThreshold { attacks: u64 },
    Weighted { join_weight: f64, attack_weight: f64, threshold: f64 },
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        UpdatePolicy::StaticInterval { seconds: 600.0 }
    }
}

/// Incidents since the last model preparation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainState {
    pub elapsed_s: f64,
    pub joins: u64,
    pub confirmed_onsets: u64,
}

pub fn should_retrain(state: &RetrainState, policy: &UpdatePolicy) -> bool {
    match *policy {
        UpdatePolicy::StaticInterval { seconds } => state.elapsed_s >= seconds,
        UpdatePolicy::NewNodeThreshold { joins } => state.joins >= joins,
        UpdatePolicy::AttackCountThreshold { attacks } => state.confirmed_onsets >= attacks,
        UpdatePolicy::Weighted {
            join_weight,
            attack_weight,
            threshold,
        } => join_weight * state.joins as f64 + attack_weight * state.confirmed_onsets as f64 >= threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: u32,
    /// `None` means every available client participates.
    pub clients_per_round: Option<usize>,
    pub update_policy: UpdatePolicy,
    pub onset_quorum: usize,
    pub confirmation_window_s: f64,
    pub sampling_seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 10,
            clients_per_round: None,
            update_policy: UpdatePolicy::default(),
            onset_quorum: 2,
            confirmation_window_s: 2.0,
            sampling_seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if self.onset_quorum == 0 {
            return Err(Error::config("onset_quorum", "must be >= 1"));
        }
        if self.clients_per_round == Some(0) {
            return Err(Error::config("clients_per_round", "must be >= 1"));
        }
        if !(self.confirmation_window_s.is_finite() && self.confirmation_window_s >= 0.0) {
            return Err(Error::config("confirmation_window_s", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    /// Sorted ascending by client id.
    pub ensembles: Vec<LocalEnsemble>,
    pub head: HeadWeights,
    pub round: u32,
    pub rounds_planned: u32,
    pub model_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Onset {
    Attack,
    Normal,
}

impl GlobalModel {
    pub fn is_complete(&self) -> bool {
        self.round + 1 >= self.rounds_planned
    }

    pub fn tree_vector(&self, features: &[f64]) -> Result<Vec<f64>> {
        let t = self.head.trees;
        let mut out = vec![0.0; self.ensembles.len() * t];
        for (e, chunk) in self.ensembles.iter().zip(out.chunks_mut(t.max(1))) {
            e.tree_outputs_into(features, &mut chunk[..t])?;
        }
        Ok(out)
    }

    pub fn probability(&self, features: &[f64]) -> Result<f64> {
        head::forward(&self.head, &self.tree_vector(features)?)
    }
}

/// Probability 0.5 exactly counts as normal.
pub fn classify(probability: f64) -> Onset {
    if probability > 0.5 {
        Onset::Attack
    } else {
        Onset::Normal
    }
}

pub fn detect_onset(model: &GlobalModel, row: &FeatureRow) -> Result<Onset> {
    if !model.is_complete() {
        return Err(Error::NotReady(format!(
            "model at round {} of {}",
            model.round, model.rounds_planned
        )));
    }
    model.probability(&row.features).map(classify)
}

pub fn round0_aggregate(
    submissions: Vec<(ClientId, LocalEnsemble)>,
    head_config: &HeadConfig,
    rounds_planned: u32,
) -> Result<GlobalModel> {
    if submissions.is_empty() {
        return Err(Error::protocol(None, "round 0 needs at least one tree ensemble"));
    }
    let mut seen = BTreeSet::new();
    let mut ensembles = Vec::with_capacity(submissions.len());
    for (cid, ensemble) in submissions {
        if !seen.insert(cid) {
            return Err(Error::protocol(Some(cid), "duplicate client id in round 0"));
        }
        if ensemble.client != cid {
            return Err(Error::protocol(
                Some(cid),
                format!("ensemble is tagged with client {}", ensemble.client),
            ));
        }
        ensemble.validate()?;
        ensembles.push(ensemble);
    }
    ensembles.sort_by_key(|e| e.client);
    let trees = uniform_tree_count(&ensembles)?;
    let width = ensembles[0].num_features;
    if let Some(e) = ensembles.iter().find(|e| e.num_features != width) {
        return Err(Error::protocol(
            Some(e.client),
            format!("ensemble expects {} features, others {width}", e.num_features),
        ));
    }
    let head = head::init(ensembles.len(), trees, head_config)?;
    Ok(GlobalModel {
        ensembles,
        head,
        round: 0,
        rounds_planned,
        model_version: 1,
    })
}

/// Sample-count-weighted element-wise mean. Updates are combined in CID order,
/// and a parameter on which every client agrees is returned unchanged.
pub fn fedavg(updates: &[(ClientId, HeadWeights, u64)]) -> Result<HeadWeights> {
    let mut sorted: Vec<&(ClientId, HeadWeights, u64)> = updates.iter().collect();
    sorted.sort_by_key(|u| u.0);
    let first = &sorted
        .first()
        .ok_or_else(|| Error::protocol(None, "fedavg needs at least one update"))?
        .1;
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::protocol(Some(pair[0].0), "duplicate update in one round"));
        }
    }
    for (cid, w, n) in &sorted {
        if !w.same_shape(first) {
            return Err(Error::protocol(Some(*cid), "weight shape mismatch"));
        }
        w.validate()?;
        if *n == 0 {
            return Err(Error::protocol(Some(*cid), "sample_count must be >= 1"));
        }
    }
    let total: f64 = sorted.iter().map(|u| u.2 as f64).sum();
    let columns: Vec<Vec<f64>> = sorted.iter().map(|u| u.1.params().collect()).collect();
    let mut out = first.clone();
    for (i, p) in out.params_mut().enumerate() {
        let v0 = columns[0][i];
        *p = if columns.iter().all(|c| c[i] == v0) {
            v0
        } else {
            columns
                .iter()
                .zip(&sorted)
                .map(|(c, u)| c[i] * u.2 as f64)
                .sum::<f64>()
                / total
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Confirmation {
    Confirmed { at_s: f64, reporters: BTreeSet<ClientId> },
    Unconfirmed,
}

/// Confirmed once `quorum` distinct clients report within `window_s` of each other.
pub fn confirm_onset(reports: &[(ClientId, f64)], quorum: usize, window_s: f64) -> Confirmation {
    let mut sorted: Vec<(ClientId, f64)> = reports.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut lo = 0;
    for hi in 0..sorted.len() {
        while sorted[hi].1 - sorted[lo].1 > window_s {
            lo += 1;
        }
        let reporters: BTreeSet<ClientId> = sorted[lo..=hi].iter().map(|r| r.0).collect();
        if reporters.len() >= quorum.max(1) {
            return Confirmation::Confirmed {
                at_s: sorted[hi].1,
                reporters,
            };
        }
    }
    Confirmation::Unconfirmed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    CollectingTrees,
    WeightRounds,
}

/// Server side of the protocol. Single logical owner of the global model.
#[derive(Debug)]
pub struct OnsetServer {
    config: FedConfig,
    head_config: HeadConfig,
    phase: Phase,
    trees: BTreeMap<ClientId, LocalEnsemble>,
    updates: BTreeMap<ClientId, (HeadWeights, u64)>,
    model: Option<GlobalModel>,
    reports: Vec<(ClientId, f64)>,
    fedavg_calls: u32,
    retrain: RetrainState,
}

impl OnsetServer {
    pub fn new(config: FedConfig, head_config: HeadConfig) -> Result<Self> {
        config.validate()?;
        head_config.validate()?;
        Ok(OnsetServer {
            config,
            head_config,
            phase: Phase::CollectingTrees,
            trees: BTreeMap::new(),
            updates: BTreeMap::new(),
            model: None,
            reports: Vec::new(),
            fedavg_calls: 0,
            retrain: RetrainState::default(),
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.config
    }

    pub fn model(&self) -> Option<&GlobalModel> {
        self.model.as_ref()
    }

    pub fn fedavg_calls(&self) -> u32 {
        self.fedavg_calls
    }

    pub fn pending_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn pending_updates(&self) -> usize {
        self.updates.len()
    }

    pub fn retrain_state(&self) -> RetrainState {
        self.retrain
    }

    pub fn should_retrain(&self) -> bool {
        should_retrain(&self.retrain, &self.config.update_policy)
    }

    pub fn advance_clock(&mut self, seconds: f64) {
        self.retrain.elapsed_s += seconds;
    }

    pub fn current_round(&self) -> Option<u32> {
        self.model.as_ref().map(|m| m.round)
    }

    /// Handle one inbound client message; returns messages to broadcast.
    pub fn handle(&mut self, message: Message) -> Result<Vec<Message>> {
        match message {
            Message::TreesUpload { cid, ensemble, .. } => {
                if self.phase != Phase::CollectingTrees {
                    return Err(Error::protocol(Some(cid), "tree upload after round 0 closed"));
                }
                if self.trees.contains_key(&cid) {
                    return Err(Error::protocol(Some(cid), "duplicate client id in round 0"));
                }
                self.trees.insert(cid, ensemble);
                Ok(Vec::new())
            }
            Message::WeightsUpdate {
                cid,
                round,
                model_version,
                weights,
                sample_count,
            } => {
                let model = self
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::protocol(Some(cid), "weights update before round 0"))?;
                if round != model.round + 1 || model_version != model.model_version {
                    return Err(Error::protocol(
                        Some(cid),
                        format!(
                            "stale update for round {round} v{model_version}; server at round {} v{}",
                            model.round, model.model_version
                        ),
                    ));
                }
                if !weights.same_shape(&model.head) {
                    return Err(Error::protocol(Some(cid), "weight shape mismatch"));
                }
                if self.updates.insert(cid, (weights, sample_count)).is_some() {
                    return Err(Error::protocol(Some(cid), "duplicate update in one round"));
                }
                Ok(Vec::new())
            }
            Message::OnsetReport { cid, time_s, .. } => Ok(self.report_onset(cid, time_s).into_iter().collect()),
            other => Err(Error::protocol(
                None,
                format!("server does not accept {}", other.type_name()),
            )),
        }
    }

    /// Close round 0 and return GLOBAL_ENSEMBLE followed by WEIGHTS_BROADCAST.
    pub fn close_round0(&mut self) -> Result<Vec<Message>> {
        if self.phase != Phase::CollectingTrees {
            return Err(Error::protocol(None, "round 0 already closed"));
        }
        if self.trees.is_empty() {
            return Err(Error::Stall { round: 0 });
        }
        let submissions = std::mem::take(&mut self.trees).into_iter().collect();
        let model = round0_aggregate(submissions, &self.head_config, self.config.rounds)?;
        self.phase = Phase::WeightRounds;
        self.retrain = RetrainState::default();
        self.model = Some(model);
        Ok(self.snapshot(VehicleId::SERVER))
    }

    /// Average this round's updates and broadcast the new head.
    pub fn close_weight_round(&mut self) -> Result<Message> {
        let model = self
            .model
            .as_mut()
            .ok_or_else(|| Error::protocol(None, "no model before round 0"))?;
        if self.updates.is_empty() {
            return Err(Error::Stall { round: model.round + 1 });
        }
        let updates: Vec<(ClientId, HeadWeights, u64)> = std::mem::take(&mut self.updates)
            .into_iter()
            .map(|(cid, (w, n))| (cid, w, n))
            .collect();
        model.head = fedavg(&updates)?;
        self.fedavg_calls += 1;
        model.round += 1;
        model.model_version += 1;
        Ok(Message::WeightsBroadcast {
            cid: VehicleId::SERVER,
            round: model.round,
            model_version: model.model_version,
            weights: model.head.clone(),
        })
    }

    fn snapshot(&self, cid: ClientId) -> Vec<Message> {
        match &self.model {
            Some(m) => vec![
                Message::GlobalEnsemble {
                    cid,
                    round: m.round,
                    model_version: m.model_version,
                    ensembles: m.ensembles.clone(),
                },
                Message::WeightsBroadcast {
                    cid,
                    round: m.round,
                    model_version: m.model_version,
                    weights: m.head.clone(),
                },
            ],
            None => Vec::new(),
        }
    }

    /// Cold start: a joining vehicle immediately receives the latest model.
    pub fn join(&mut self, cid: ClientId) -> Vec<Message> {
        self.retrain.joins += 1;
        self.snapshot(cid)
    }

    /// Record an onset report; returns ONSET_CONFIRMED when the quorum is met.
    pub fn report_onset(&mut self, cid: ClientId, time_s: f64) -> Option<Message> {
        let window = self.config.confirmation_window_s;
        self.reports.retain(|r| time_s - r.1 <= window);
        self.reports.push((cid, time_s));
        match confirm_onset(&self.reports, self.config.onset_quorum, window) {
            Confirmation::Confirmed { at_s, reporters } => {
                self.reports.clear();
                self.retrain.confirmed_onsets += 1;
                let (round, model_version) = self.model.as_ref().map_or((0, 0), |m| (m.round, m.model_version));
                Some(Message::OnsetConfirmed {
                    cid: VehicleId::SERVER,
                    round,
                    model_version,
                    time_s: at_s,
                    reporters,
                })
            }
            Confirmation::Unconfirmed => None,
        }
    }
}

/// Client side: owns its local rows and a copy of the global model.
#[derive(Debug, Clone)]
pub struct OnsetClient {
    pub cid: ClientId,
    rows: Vec<FeatureRow>,
    gbdt: GbdtConfig,
    head_config: HeadConfig,
    model: Option<GlobalModel>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl OnsetClient {
    pub fn new(cid: ClientId, rows: Vec<FeatureRow>, gbdt: GbdtConfig, head_config: HeadConfig) -> Self {
        OnsetClient {
            cid,
            rows,
            gbdt,
            head_config,
            model: None,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn model(&self) -> Option<&GlobalModel> {
        self.model.as_ref()
    }

    pub fn model_version(&self) -> Option<u64> {
        self.model.as_ref().map(|m| m.model_version)
    }

    pub fn train_trees(&self) -> Result<Message> {
        let ensemble = gbdt::train(self.cid, &self.rows, &self.gbdt)?;
        Ok(Message::TreesUpload {
            cid: self.cid,
            round: 0,
            model_version: 0,
            ensemble,
        })
    }

    /// Apply a server broadcast.
    pub fn handle(&mut self, message: Message) -> Result<()> {
        match message {
            Message::GlobalEnsemble {
                round,
                model_version,
                ensembles,
                ..
            } => {
                let trees = uniform_tree_count(&ensembles)?;
                let head = HeadWeights::zeros(ensembles.len(), trees, self.head_config.filters);
                let model = GlobalModel {
                    ensembles,
                    head,
                    round,
                    rounds_planned: u32::MAX,
                    model_version,
                };
                self.inputs = self
                    .rows
                    .iter()
                    .map(|r| model.tree_vector(&r.features))
                    .collect::<Result<_>>()?;
                self.targets = self.rows.iter().map(|r| r.label.target()).collect();
                self.model = Some(model);
                Ok(())
            }
            Message::WeightsBroadcast {
                round,
                model_version,
                weights,
                ..
            } => {
                let model = self
                    .model
                    .as_mut()
                    .ok_or_else(|| Error::protocol(Some(self.cid), "weights before ensembles"))?;
                if !weights.same_shape(&model.head) && model.round != round {
                    return Err(Error::protocol(Some(self.cid), "weight shape mismatch"));
                }
                model.head = weights;
                model.round = round;
                model.model_version = model_version;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn set_rounds_planned(&mut self, rounds: u32) {
        if let Some(m) = self.model.as_mut() {
            m.rounds_planned = rounds;
        }
    }

    /// Local head training on the current global head.
    pub fn client_update(&self) -> Result<Message> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::protocol(Some(self.cid), "no global model yet"))?;
        let seed = self.head_config.rng_seed
            ^ (u64::from(self.cid.0) << 20)
            ^ u64::from(model.round).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let weights = head::train_on_vectors(&model.head, &self.inputs, &self.targets, &self.head_config, seed)?;
        Ok(Message::WeightsUpdate {
            cid: self.cid,
            round: model.round + 1,
            model_version: model.model_version,
            weights,
            sample_count: self.rows.len() as u64,
        })
    }

    pub fn detect(&self, row: &FeatureRow) -> Result<Onset> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::NotReady(format!("client {} has no model", self.cid)))?;
        detect_onset(model, row)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: GlobalModel,
    pub fedavg_calls: u32,
    pub elapsed_s: f64,
    pub bytes_exchanged: u64,
}

pub fn run_training(clients: &mut [OnsetClient], server: &mut OnsetServer) -> Result<TrainingOutcome> {
    run_training_with(clients, server, &|_, _| true)
}

/// Drive round 0 and R-1 weight rounds. `available(round, cid)` models
/// dropout; a round proceeds with whoever is available.
pub fn run_training_with(
    clients: &mut [OnsetClient],
    server: &mut OnsetServer,
    available: &(dyn Fn(u32, ClientId) -> bool + Sync),
) -> Result<TrainingOutcome> {
    let started = Instant::now();
    let config = server.config().clone();
    let mut uplink = LineQueue::new();
    let mut bytes = 0;

    let uploads: Vec<Message> = clients
        .par_iter()
        .filter(|c| available(0, c.cid))
        .map(OnsetClient::train_trees)
        .collect::<Result<_>>()?;
    if uploads.is_empty() {
        return Err(Error::Stall { round: 0 });
    }
    for m in &uploads {
        uplink.send(m)?;
    }
    for m in uplink.drain()? {
        server.handle(m)?;
    }
    let broadcast = server.close_round0()?;
    bytes += deliver(clients, &broadcast)?;
    for c in clients.iter_mut() {
        c.set_rounds_planned(config.rounds);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.sampling_seed);
    for round in 1..config.rounds {
        let mut selected: Vec<usize> = (0..clients.len()).filter(|&i| available(round, clients[i].cid)).collect();
        if let Some(limit) = config.clients_per_round {
            if selected.len() > limit {
                selected.shuffle(&mut rng);
                selected.truncate(limit);
                selected.sort_unstable();
            }
        }
        if selected.is_empty() {
            return Err(Error::Stall { round });
        }
        let updates: Vec<Message> = selected
            .par_iter()
            .map(|&i| clients[i].client_update())
            .collect::<Result<_>>()?;
        for m in &updates {
            uplink.send(m)?;
        }
        for m in uplink.drain()? {
            server.handle(m)?;
        }
        let msg = server.close_weight_round()?;
        bytes += deliver(clients, std::slice::from_ref(&msg))?;
    }
    bytes += uplink.bytes_sent();
    let model = server
        .model()
        .cloned()
        .ok_or_else(|| Error::protocol(None, "training finished without a model"))?;
    Ok(TrainingOutcome {
        model,
        fedavg_calls: server.fedavg_calls(),
        elapsed_s: started.elapsed().as_secs_f64(),
        bytes_exchanged: bytes,
    })
}

/// Send broadcasts to every client through its own line queue.
fn deliver(clients: &mut [OnsetClient], messages: &[Message]) -> Result<u64> {
    let lines: Vec<String> = messages.iter().map(Message::to_line).collect::<Result<_>>()?;
    let per_client: u64 = lines.iter().map(|l| l.len() as u64 + 1).sum();
    clients.par_iter_mut().try_for_each(|c| -> Result<()> {
        for line in &lines {
            c.handle(Message::from_line(line)?)?;
        }
        Ok(())
    })?;
    Ok(per_client * clients.len() as u64)
}
