//! Request and response bodies of the HTTP service, shared by server and client.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::fed_mnd::ListMode;
use crate::fed_onset::FedConfig;
use crate::head::HeadConfig;
use crate::metrics::{EvalReport, Timing};
use crate::mnd::MadParams;
use crate::pipeline::LabelMode;
use crate::preprocess::{NeighborCounts, DEFAULT_WINDOW};
use crate::scenario::ScenarioConfig;
use crate::ClientId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    #[serde(default)]
    pub config: ScenarioConfig,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub events: usize,
    pub events_path: PathBuf,
    pub truth_path: PathBuf,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRequest {
    pub scenario_path: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub label_mode: LabelMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessResponse {
    pub vehicles: usize,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub report: EvalReport,
    pub timing: Timing,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirRequest {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub rows: usize,
    pub csv: String,
    pub table: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OnsetSession {
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub cid: ClientId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetStatus {
    pub round: Option<u32>,
    pub model_version: Option<u64>,
    pub pending_trees: usize,
    pub pending_updates: usize,
    pub fedavg_calls: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub counts: NeighborCounts,
    #[serde(default)]
    pub params: MadParams,
}

fn default_timer() -> f64 {
    120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MndSession {
    pub mode: ListMode,
    pub threshold: usize,
    #[serde(default = "default_timer")]
    pub timer_duration_s: f64,
}

impl Default for MndSession {
    fn default() -> Self {
        MndSession {
            mode: ListMode::Stateless,
            threshold: 1,
            timer_duration_s: default_timer(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clock {
    pub now_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accepted {
    pub queued: usize,
}

/// Error body for every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub kind: String,
    pub message: String,
}
