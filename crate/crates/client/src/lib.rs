//! Typed async client for the ADVENT HTTP service.

use std::path::{Path, PathBuf};

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use advent_core::api::*;
use advent_core::fed_onset::{FedConfig, GlobalModel};
use advent_core::head::HeadConfig;
use advent_core::metrics::{Confusion, EvalReport, Metrics};
use advent_core::mnd::{MadParams, SuspicionReport};
use advent_core::pipeline::{LabelMode, RunManifest};
use advent_core::preprocess::NeighborCounts;
use advent_core::protocol::Message;
use advent_core::scenario::ScenarioConfig;
use advent_core::ClientId;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("server returned {status} ({kind}): {message}")]
    Api {
        status: StatusCode,
        kind: String,
        message: String,
    },
    #[error("unreadable response from {url}: {message}")]
    Decode { url: String, message: String },
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct AdventClient {
    base: String,
    http: reqwest::Client,
}

impl AdventClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        AdventClient {
            base,
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn send<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let url = format!("{}{}", self.base, path);
        let mut req = self.http.request(method, &url);
        if let Some(b) = body {
            req = req.json(b);
        }
        let transport = |source| ClientError::Transport {
            url: url.clone(),
            source,
        };
        let resp = req.send().await.map_err(transport)?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(transport)?;
        if !status.is_success() {
            return Err(match serde_json::from_slice::<ApiError>(&bytes) {
                Ok(e) => ClientError::Api {
                    status,
                    kind: e.kind,
                    message: e.message,
                },
                Err(_) => ClientError::Api {
                    status,
                    kind: "http".into(),
                    message: String::from_utf8_lossy(&bytes).into_owned(),
                },
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            url,
            message: e.to_string(),
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.send::<(), T>(Method::GET, path, None).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.send(Method::POST, path, Some(body)).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn generate(&self, config: &ScenarioConfig, output: &Path) -> Result<GenerateResponse> {
        let req = GenerateRequest {
            config: config.clone(),
            output: output.to_path_buf(),
        };
        self.post("/v1/generate", &req).await
    }

    pub async fn preprocess(
        &self,
        scenario_path: &Path,
        output_dir: &Path,
        window: usize,
        label_mode: LabelMode,
    ) -> Result<PreprocessResponse> {
        let req = PreprocessRequest {
            scenario_path: scenario_path.to_path_buf(),
            output_dir: output_dir.to_path_buf(),
            window,
            label_mode,
        };
        self.post("/v1/preprocess", &req).await
    }

    pub async fn run(&self, manifest: &RunManifest) -> Result<RunResponse> {
        self.post("/v1/run", manifest).await
    }

    pub async fn evaluate(&self, dir: &Path) -> Result<EvalReport> {
        self.post("/v1/evaluate", &DirRequest { dir: dir.to_path_buf() }).await
    }

    pub async fn report(&self, dir: &Path) -> Result<ReportResponse> {
        self.post("/v1/report", &DirRequest { dir: dir.to_path_buf() }).await
    }

    pub async fn onset_session(&self, fed: FedConfig, head: HeadConfig) -> Result<OnsetStatus> {
        self.post("/v1/onset/session", &OnsetSession { fed, head }).await
    }

    /// Send one client message to the onset server; returns any broadcasts it triggers.
    pub async fn onset_send(&self, message: &Message) -> Result<Vec<Message>> {
        self.post("/v1/onset/messages", message).await
    }

    pub async fn onset_close_round0(&self) -> Result<Vec<Message>> {
        self.post("/v1/onset/round0/close", &()).await
    }

    pub async fn onset_close_round(&self) -> Result<Message> {
        self.post("/v1/onset/round/close", &()).await
    }

    pub async fn onset_join(&self, cid: ClientId) -> Result<Vec<Message>> {
        self.post("/v1/onset/join", &JoinRequest { cid }).await
    }

    pub async fn onset_status(&self) -> Result<OnsetStatus> {
        self.get("/v1/onset/status").await
    }

    pub async fn onset_model(&self) -> Result<GlobalModel> {
        self.get("/v1/onset/model").await
    }

    pub async fn mnd_detect(&self, counts: &NeighborCounts, params: MadParams) -> Result<SuspicionReport> {
        let req = DetectRequest {
            counts: counts.clone(),
            params,
        };
        self.post("/v1/mnd/detect", &req).await
    }

    pub async fn mnd_session(&self, session: &MndSession) -> Result<MndSession> {
        self.post("/v1/mnd/session", session).await
    }

    pub async fn mnd_send(&self, message: &Message) -> Result<Accepted> {
        self.post("/v1/mnd/messages", message).await
    }

    pub async fn mnd_aggregate(&self, now_s: f64) -> Result<Message> {
        self.post("/v1/mnd/aggregate", &Clock { now_s }).await
    }

    pub async fn mnd_list(&self, now_s: f64) -> Result<Message> {
        self.get(&format!("/v1/mnd/list?now_s={now_s}")).await
    }

    pub async fn score(&self, confusion: &Confusion) -> Result<Metrics> {
        self.post("/v1/metrics/score", confusion).await
    }
}

/// Absolute form of `path` relative to the caller's working directory, so a
/// server with a different working directory resolves the same file.
pub fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}
