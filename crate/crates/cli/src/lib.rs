//! The `storyloop` command: serve the task service, run simulations, replay
//! and export event logs.
//!
//! Exit codes are 0 on success, 2 for bad input (flags, config, scenario,
//! corrupt log, unknown version) and 3 for runtime failures. Diagnostics go
//! to stderr only when something fails.

use std::fs;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use storyloop_core::domain::{Phase, StoryConfig};
use storyloop_core::eventlog::{
    export_story, read_log, replay, write_log, ExportError, FileStore, LogError, ReplayError,
};
use storyloop_core::service::{ServiceError, StoryStatus, SystemClock, TaskService};
use storyloop_core::sim::scenario::{
    run_scenario_with_port, summarize, summary_csv, Scenario, ScenarioError, SimError,
};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_EXPIRE_EVERY_SECS: u64 = 30;

#[derive(Debug, Parser)]
#[command(
    name = "storyloop",
    version,
    about = "Reflect-and-revise crowd story writing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the task service over HTTP.
    Serve(ServeArgs),
    /// Run a scenario file against simulated workers.
    Simulate(SimulateArgs),
    /// Rebuild a story from its event log and print its status.
    Replay(ReplayArgs),
    /// Write one version of a story from its event log.
    Export(ExportArgs),
}

/// Flags and env vars override the config file, flags win over env.
#[derive(Debug, Clone, Default, Args)]
pub struct ServeArgs {
    /// TOML file with server settings and a `[story]` table of defaults.
    #[arg(long, env = "STORYLOOP_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "STORYLOOP_LISTEN")]
    pub listen: Option<SocketAddr>,
    /// Seeds condition assignment.
    #[arg(long, env = "STORYLOOP_SEED")]
    pub seed: Option<u64>,
    /// Directory holding the event logs.
    #[arg(long, env = "STORYLOOP_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Seconds between sweeps for stale assignments.
    #[arg(long, env = "STORYLOOP_EXPIRE_EVERY")]
    pub expire_every_secs: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// A version number or `latest`.
    #[arg(long, default_value = "latest")]
    pub version: VersionSel,
    #[arg(long, value_enum, default_value_t = ExportFormat::Document)]
    pub format: ExportFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VersionSel(pub Option<u32>);

impl FromStr for VersionSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "latest" {
            return Ok(VersionSel(None));
        }
        s.parse()
            .map(|v| VersionSel(Some(v)))
            .map_err(|_| format!("`{s}` is neither a version number nor `latest`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    /// The JSON story document.
    Document,
    /// Scenes separated by blank lines.
    PlainText,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("bad-config: {path}: {reason}")]
    BadConfig { path: PathBuf, reason: String },
    #[error("bad-config: {0}")]
    MissingSetting(String),
    #[error("bad-scenario: {path}: {source}")]
    BadScenario {
        path: PathBuf,
        source: ScenarioError,
    },
    #[error("corrupt-log: {path}: corrupt event at seq {seq}: {reason}")]
    CorruptLog {
        path: PathBuf,
        seq: u64,
        reason: String,
    },
    #[error("corrupt-log: {path}: log is empty")]
    EmptyLog { path: PathBuf },
    #[error("unknown-version: {0}")]
    UnknownVersion(ExportError),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("bind-failure: {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("storage-failure: {0}")]
    Storage(String),
    #[error("server failed: {0}")]
    Server(io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadConfig { .. }
            | CliError::MissingSetting(_)
            | CliError::BadScenario { .. }
            | CliError::CorruptLog { .. }
            | CliError::EmptyLog { .. }
            | CliError::UnknownVersion(_)
            | CliError::Read { .. } => 2,
            CliError::Write { .. }
            | CliError::Bind { .. }
            | CliError::Sim(_)
            | CliError::Storage(_)
            | CliError::Server(_) => 3,
        }
    }

    fn from_log(path: &Path, e: LogError) -> CliError {
        match e {
            LogError::Corrupt { seq, reason } => CliError::CorruptLog {
                path: path.to_owned(),
                seq,
                reason,
            },
            LogError::Storage(source) => CliError::Read {
                path: path.to_owned(),
                source,
            },
            other => CliError::Storage(other.to_string()),
        }
    }

    fn from_replay(path: &Path, e: ReplayError) -> CliError {
        let (seq, reason) = match e {
            ReplayError::GapDetected(seq) => (seq, "gap in seq".to_owned()),
            ReplayError::CorruptEvent { seq, reason } => (seq, reason),
        };
        CliError::CorruptLog {
            path: path.to_owned(),
            seq,
            reason,
        }
    }
}

/// Runs one command to completion. `serve` blocks until ctrl-c or SIGTERM.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve(args) => {
            let settings = ServeSettings::resolve(&args)?;
            let rt = tokio::runtime::Runtime::new().map_err(CliError::Server)?;
            rt.block_on(serve(
                settings,
                |addr| println!("listening on http://{addr}"),
                shutdown_signal(),
            ))
        }
        Command::Simulate(args) => simulate(&args),
        Command::Replay(args) => {
            let report = replay_log(&args.log)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("reports serialize")
            );
            Ok(())
        }
        Command::Export(args) => export(&args),
    }
}

/// The `serve` config file. Relative paths are taken from the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeFile {
    pub listen: Option<SocketAddr>,
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub expire_every_secs: Option<u64>,
    #[serde(default)]
    pub story: StoryConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeSettings {
    pub listen: SocketAddr,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub expire_every: Duration,
    pub defaults: StoryConfig,
}

impl ServeSettings {
    pub fn resolve(args: &ServeArgs) -> Result<ServeSettings, CliError> {
        let file = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| CliError::Read {
                    path: path.clone(),
                    source,
                })?;
                let bad = |reason: String| CliError::BadConfig {
                    path: path.clone(),
                    reason,
                };
                let mut file: ServeFile =
                    toml::from_str(&text).map_err(|e| bad(e.message().to_owned()))?;
                file.story.validate().map_err(|e| bad(e.to_string()))?;
                if let (Some(dir), Some(base)) = (&file.data_dir, path.parent()) {
                    file.data_dir = Some(base.join(dir));
                }
                file
            }
            None => ServeFile::default(),
        };
        let data_dir = args.data_dir.clone().or(file.data_dir).ok_or_else(|| {
            CliError::MissingSetting("no data directory; pass --data-dir or set data_dir".into())
        })?;
        let expire_every_secs = args
            .expire_every_secs
            .or(file.expire_every_secs)
            .unwrap_or(DEFAULT_EXPIRE_EVERY_SECS);
        if expire_every_secs == 0 {
            return Err(CliError::MissingSetting(
                "expire_every_secs must be positive".into(),
            ));
        }
        Ok(ServeSettings {
            listen: args
                .listen
                .or(file.listen)
                .unwrap_or_else(|| DEFAULT_LISTEN.parse().expect("default address parses")),
            seed: args.seed.or(file.seed).unwrap_or(0),
            data_dir,
            expire_every: Duration::from_secs(expire_every_secs),
            defaults: file.story,
        })
    }
}

fn open_service(settings: &ServeSettings) -> Result<TaskService, CliError> {
    let dir = &settings.data_dir;
    let store = FileStore::open(dir).map_err(|e| CliError::from_log(dir, e))?;
    TaskService::open(Box::new(store), Arc::new(SystemClock), settings.seed).map_err(|e| match e {
        ServiceError::Log(e) => CliError::from_log(dir, e),
        ServiceError::Replay { story, error } => {
            CliError::from_replay(&dir.join(story.as_str()), error)
        }
        other => CliError::Storage(other.to_string()),
    })
}

/// Replays the data directory, binds, calls `on_ready` with the bound
/// address and serves until `shutdown` resolves. Every accepted write is
/// already synced, so shutdown has nothing left to flush.
pub async fn serve(
    settings: ServeSettings,
    on_ready: impl FnOnce(SocketAddr),
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), CliError> {
    let service = Arc::new(open_service(&settings)?);
    let listener = tokio::net::TcpListener::bind(settings.listen)
        .await
        .map_err(|source| CliError::Bind {
            addr: settings.listen,
            source,
        })?;
    on_ready(listener.local_addr().map_err(CliError::Server)?);

    let sweeper = {
        let service = service.clone();
        let mut every = tokio::time::interval(settings.expire_every);
        tokio::spawn(async move {
            loop {
                every.tick().await;
                if let Err(e) = service.expire_stale(service.now()) {
                    eprintln!("storyloop: expiry sweep failed: {e}");
                }
            }
        })
    };
    let app = storyloop_server::router(service, settings.defaults);
    let served = axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    served.map_err(CliError::Server)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        let term = async {
            match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
                Ok(mut s) => {
                    s.recv().await;
                }
                Err(_) => std::future::pending::<()>().await,
            }
        };
        tokio::select! {
            _ = ctrl_c => {}
            _ = term => {}
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
}

fn write_file(path: PathBuf, contents: &str) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|source| CliError::Write { path, source })
}

/// Writes `<label>.transcript.json` and `<label>.events.ndjson` per run and
/// one `summary.csv`.
pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let scenario = Scenario::load(&args.scenario).map_err(|source| CliError::BadScenario {
        path: args.scenario.clone(),
        source,
    })?;
    fs::create_dir_all(&args.out).map_err(|source| CliError::Write {
        path: args.out.clone(),
        source,
    })?;
    let mut transcripts = Vec::new();
    for spec in scenario.run_specs() {
        let (port, story, transcript) = run_scenario_with_port(&spec)?;
        let events = port.service.events(&story).map_err(SimError::from)?;
        let log = args.out.join(format!("{}.events.ndjson", spec.label));
        write_log(&log, &events).map_err(|e| match e {
            LogError::Storage(source) => CliError::Write {
                path: log.clone(),
                source,
            },
            other => CliError::Storage(other.to_string()),
        })?;
        write_file(
            args.out.join(format!("{}.transcript.json", spec.label)),
            &transcript.to_json(),
        )?;
        transcripts.push(transcript);
    }
    let rows = summarize(&scenario, &transcripts)?;
    write_file(args.out.join("summary.csv"), &summary_csv(&rows))
}

/// What `replay` prints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    #[serde(flatten)]
    pub status: StoryStatus,
    pub events: usize,
    pub complete: bool,
}

fn load_runtime(log: &Path) -> Result<(storyloop_core::eventlog::StoryRuntime, usize), CliError> {
    let events = read_log(log).map_err(|e| CliError::from_log(log, e))?;
    if events.is_empty() {
        return Err(CliError::EmptyLog {
            path: log.to_owned(),
        });
    }
    let rt = replay(&events).map_err(|e| CliError::from_replay(log, e))?;
    Ok((rt, events.len()))
}

pub fn replay_log(log: &Path) -> Result<ReplayReport, CliError> {
    let (rt, events) = load_runtime(log)?;
    Ok(ReplayReport {
        status: StoryStatus::from(&rt),
        events,
        complete: rt.state.phase == Phase::Complete,
    })
}

pub fn export(args: &ExportArgs) -> Result<(), CliError> {
    let (rt, _) = load_runtime(&args.log)?;
    let doc = export_story(&rt.state, args.version.0).map_err(CliError::UnknownVersion)?;
    let text = match args.format {
        ExportFormat::Document => doc.to_json(),
        ExportFormat::PlainText => doc.to_plain_text(),
    };
    write_file(args.out.clone(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("serve.toml");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn file_then_env_then_flag() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(
            dir.path(),
            "listen = \"127.0.0.1:9000\"\nseed = 4\ndata_dir = \"logs\"\n[story]\nrevision_rounds = 2\n",
        );
        let from_file = ServeSettings::resolve(&ServeArgs {
            config: Some(config.clone()),
            ..ServeArgs::default()
        })
        .unwrap();
        assert_eq!(from_file.listen, "127.0.0.1:9000".parse().unwrap());
        assert_eq!(from_file.seed, 4);
        assert_eq!(from_file.data_dir, dir.path().join("logs"));
        assert_eq!(from_file.defaults.revision_rounds, 2);
        assert_eq!(
            from_file.expire_every,
            Duration::from_secs(DEFAULT_EXPIRE_EVERY_SECS)
        );

        // clap folds env vars into the same fields, below explicit flags
        let cli = Cli::try_parse_from([
            "storyloop",
            "serve",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "9",
        ])
        .unwrap();
        let Command::Serve(args) = cli.command else {
            panic!("parsed the wrong command")
        };
        let overridden = ServeSettings::resolve(&args).unwrap();
        assert_eq!(overridden.seed, 9);
        assert_eq!(overridden.listen, from_file.listen);
    }

    #[test]
    fn bad_config_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        for (text, field) in [
            ("[story]\nunlock_threshold = 99\n", "unlock_threshold"),
            ("[story]\nscene_cuont = 3\n", "scene_cuont"),
            ("lisen = \"x\"\n", "lisen"),
        ] {
            let config = write_config(dir.path(), text);
            let err = ServeSettings::resolve(&ServeArgs {
                config: Some(config),
                data_dir: Some(dir.path().into()),
                ..ServeArgs::default()
            })
            .unwrap_err();
            assert_eq!(err.exit_code(), 2);
            assert!(err.to_string().contains(field), "{err}");
        }
    }

    #[test]
    fn data_dir_is_required() {
        let err = ServeSettings::resolve(&ServeArgs::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn version_selector() {
        assert_eq!("latest".parse::<VersionSel>().unwrap(), VersionSel(None));
        assert_eq!("3".parse::<VersionSel>().unwrap(), VersionSel(Some(3)));
        assert!("-1".parse::<VersionSel>().is_err());
    }
}
