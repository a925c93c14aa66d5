//! `advent`: command-line client of the ADVENT service.
//!
//! Every command talks HTTP to a server. Without `--server` an embedded one is
//! started on a loopback port for the duration of the command.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use advent_client::{absolute, AdventClient};
use advent_core::pipeline::{LabelMode, Method, MndMode, RunManifest};
use advent_core::preprocess::DEFAULT_WINDOW;
use advent_core::scenario::ScenarioConfig;

#[derive(Debug, Parser)]
#[command(name = "advent", version, about = "VANET flood detection pipeline")]
struct Cli {
    /// Base URL of a running service; an embedded server is used when absent.
    #[arg(long, global = true, env = "ADVENT_SERVER")]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write the event log plus its truth sidecar.
    Generate {
        /// Scenario config (JSON). Missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Event log path (`.csv`); truth goes next to it as `.truth.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-vehicle feature rows as CSV.
    Preprocess {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, value_parser = parse_label_mode, default_value = "wall_clock")]
        label_mode: LabelMode,
    },
    /// Train, detect and score one configuration.
    Run(RunArgs),
    /// Recompute a run directory's report from its decision artifacts.
    Evaluate { dir: PathBuf },
    /// Tabulate every report under a directory.
    Report { dir: PathBuf },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: SocketAddr,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run manifest (JSON). Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario event log to evaluate on.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Train on this scenario instead of a chronological split of `--scenario`.
    #[arg(long)]
    train_scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// local_mad, fl_aggregate or fl_threshold(N).
    #[arg(long, value_parser = parse_mnd_mode)]
    mnd_mode: Option<MndMode>,
    /// Reporter threshold; implies fl_threshold when no mode is given.
    #[arg(long)]
    th: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: advent_core::Error| e.to_string())
}

fn parse_mnd_mode(s: &str) -> Result<MndMode, String> {
    s.parse().map_err(|e: advent_core::Error| e.to_string())
}

fn parse_label_mode(s: &str) -> Result<LabelMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown label mode {s:?}"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Flags > config file > defaults.
fn scenario_config(config: Option<&Path>, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg: ScenarioConfig = match config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    Ok(cfg)
}

/// Flags > manifest file > defaults.
fn run_manifest(args: &RunArgs) -> Result<RunManifest> {
    let mut m: RunManifest = match &args.config {
        Some(p) => read_json(p)?,
        None => RunManifest::default(),
    };
    if let Some(s) = &args.scenario {
        m.scenario_path = s.clone();
    }
    if let Some(s) = &args.train_scenario {
        m.train_scenario_path = Some(s.clone());
    }
    if let Some(s) = args.seed {
        m.seed = s;
    }
    if let Some(method) = args.method {
        m.method = method;
    }
    if let Some(mode) = args.mnd_mode {
        m.mnd_mode = mode;
    }
    if let Some(th) = args.th {
        match (args.mnd_mode, m.mnd_mode) {
            (Some(MndMode::LocalMad | MndMode::FlAggregate), _) => {
                bail!("--th only applies to --mnd-mode fl_threshold")
            }
            _ => m.mnd_mode = MndMode::FlThreshold(th),
        }
    }
    if let Some(out) = &args.out {
        m.output_dir = out.clone();
    }
    if m.scenario_path.as_os_str().is_empty() {
        bail!("no scenario: pass --scenario or set scenario_path in the manifest");
    }
    m.scenario_path = absolute(&m.scenario_path);
    m.train_scenario_path = m.train_scenario_path.as_deref().map(absolute);
    m.output_dir = absolute(&m.output_dir);
    Ok(m)
}

async fn execute(client: &AdventClient, command: Command) -> Result<()> {
    match command {
        Command::Generate { config, seed, out } => {
            let cfg = scenario_config(config.as_deref(), seed)?;
            let resp = client.generate(&cfg, &absolute(&out)).await?;
            println!("{} events -> {}", resp.events, resp.events_path.display());
            println!("ground truth -> {}", resp.truth_path.display());
        }
        Command::Preprocess {
            scenario,
            out,
            window,
            label_mode,
        } => {
            let resp = client
                .preprocess(&absolute(&scenario), &absolute(&out), window, label_mode)
                .await?;
            println!("{} vehicle files -> {}", resp.vehicles, resp.output_dir.display());
        }
        Command::Run(args) => {
            let manifest = run_manifest(&args)?;
            let resp = client.run(&manifest).await?;
            println!("{}", serde_json::to_string_pretty(&resp.report)?);
            println!("artifacts -> {}", resp.output_dir.display());
        }
        Command::Evaluate { dir } => {
            let report = client.evaluate(&absolute(&dir)).await?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { dir } => {
            let resp = client.report(&absolute(&dir)).await?;
            print!("{}", resp.table);
        }
        Command::Serve { .. } => unreachable!("handled before connecting"),
    }
    Ok(())
}

async fn main_async(cli: Cli) -> Result<()> {
    if let Command::Serve { addr } = cli.command {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let state = advent_server::AppState::new()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        advent_server::serve(listener, state, shutdown).await?;
        return Ok(());
    }
    let client = match &cli.server {
        Some(url) => AdventClient::new(url.clone()),
        None => {
            let (addr, _task) = advent_server::spawn(SocketAddr::from(([127, 0, 0, 1], 0)))
                .await
                .context("starting embedded server")?;
            tracing::debug!(%addr, "embedded server started");
            AdventClient::new(format!("http://{addr}"))
        }
    };
    execute(&client, cli.command).await
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("ADVENT_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: starting runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(main_async(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
