//! Experiment configs, run layouts and the verification helpers built on
//! canonical traces.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.toml        copy of the configuration the run used
//! <out>/traces/<id>.trace  raw trace per component
//! <out>/results/<id>.txt   report lines per component
//! <out>/logs/<id>.log      stdout and stderr per process
//! <out>/run/               sockets, shared memory, readiness and progress files
//! <out>/summary.txt
//! ```

pub mod config;
mod local;
mod process;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

pub use config::{ChannelSpec, ComponentKind, ComponentSpec, ConfigError, ConfigErrors, ExperimentConfig, ProxySpec};
pub use local::{run_monolith, run_threaded};
pub use process::{component_main, run, RunOptions};

use crate::host::Host;
use crate::net::pktgen::Pktgen;
use crate::net::switch::Switch;
use crate::nic::Nic;
use crate::proto::Message;
use crate::sync::{Context, Model, ModelError, MonolithError, PortId, PortStats, SyncError};
use crate::trace::{self, Divergence, TraceOptions};

/// Any built-in component model.
#[derive(Debug)]
pub enum AnyModel {
    Host(Host),
    Nic(Nic),
    Switch(Switch),
    Pktgen(Pktgen),
}

impl AnyModel {
    pub fn build(kind: &ComponentKind) -> Result<AnyModel, ModelError> {
        Ok(match kind {
            ComponentKind::Host(c) => AnyModel::Host(Host::new(c.clone())?),
            ComponentKind::Nic(c) => AnyModel::Nic(Nic::new(*c)),
            ComponentKind::Switch(c) => AnyModel::Switch(Switch::new(*c)),
            ComponentKind::Pktgen(c) => AnyModel::Pktgen(Pktgen::new(c.clone())?),
        })
    }

    fn inner(&mut self) -> &mut dyn Model {
        match self {
            AnyModel::Host(m) => m,
            AnyModel::Nic(m) => m,
            AnyModel::Switch(m) => m,
            AnyModel::Pktgen(m) => m,
        }
    }
}

impl Model for AnyModel {
    fn start(&mut self, cx: &mut Context<'_>) -> Result<(), ModelError> {
        self.inner().start(cx)
    }

    fn on_message(&mut self, cx: &mut Context<'_>, port: PortId, msg: Message) -> Result<(), ModelError> {
        self.inner().on_message(cx, port, msg)
    }

    fn on_timer(&mut self, cx: &mut Context<'_>, token: u64) -> Result<(), ModelError> {
        self.inner().on_timer(cx, token)
    }

    fn report(&self) -> Vec<String> {
        match self {
            AnyModel::Host(m) => m.report(),
            AnyModel::Nic(m) => m.report(),
            AnyModel::Switch(m) => m.report(),
            AnyModel::Pktgen(m) => m.report(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestrateError {
    #[error("invalid configuration:\n{0}")]
    Config(#[from] ConfigErrors),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot build component {id}: {reason}")]
    Build { id: String, reason: String },
    #[error("failed to spawn {id}: {reason}")]
    SpawnFailed { id: String, reason: String },
    #[error("components never became ready: {0:?}")]
    StartupTimeout(Vec<String>),
    #[error("no simulation progress for {0:?}")]
    WatchdogTimeout(Duration),
    #[error("{id} exited with {}", code.map_or("a signal".to_string(), |c| format!("status {c}")))]
    ComponentCrashed { id: String, code: Option<i32> },
    #[error(transparent)]
    Monolith(#[from] MonolithError),
    #[error("component {id}: {source}")]
    Sync { id: String, source: SyncError },
    #[error("component {id}, port {port}: {reason}")]
    Channel { id: String, port: String, reason: String },
    #[error("component {0} is not declared")]
    UnknownComponent(String),
    #[error("{path}: bad trace: {reason}")]
    BadTrace { path: PathBuf, reason: String },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OrchestrateError + '_ {
    move |source| OrchestrateError::Io { path: path.to_path_buf(), source }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn trace(&self, id: &str) -> PathBuf {
        self.root.join("traces").join(format!("{id}.trace"))
    }

    pub fn result(&self, id: &str) -> PathBuf {
        self.root.join("results").join(format!("{id}.txt"))
    }

    pub fn log(&self, id: &str) -> PathBuf {
        self.root.join("logs").join(format!("{id}.log"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }

    pub fn create(&self) -> Result<(), OrchestrateError> {
        for d in ["traces", "results", "logs", "run"] {
            let p = self.root.join(d);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(())
    }

    pub fn read_trace(&self, id: &str) -> Result<String, OrchestrateError> {
        let p = self.trace(id);
        fs::read_to_string(&p).map_err(io_err(&p))
    }

    pub fn read_result(&self, id: &str) -> Result<Vec<String>, OrchestrateError> {
        let p = self.result(id);
        Ok(fs::read_to_string(&p).map_err(io_err(&p))?.lines().map(str::to_string).collect())
    }

    /// Component ids with a trace file, sorted.
    pub fn trace_ids(&self) -> Result<Vec<String>, OrchestrateError> {
        let d = self.root.join("traces");
        let mut ids = Vec::new();
        for e in fs::read_dir(&d).map_err(io_err(&d))? {
            let name = e.map_err(io_err(&d))?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".trace") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }
}

/// What a finished run left behind.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: RunDir,
    pub ids: Vec<String>,
    pub wall: Duration,
}

pub(crate) fn trace_options(cfg: &ExperimentConfig) -> TraceOptions {
    TraceOptions { include_sync: cfg.trace_sync, dump_payload: cfg.trace_payload }
}

/// Report lines of a component followed by per-channel message counts.
pub(crate) fn result_lines(report: Vec<String>, ports: &[(String, PortStats)]) -> String {
    let mut s = String::new();
    for l in report {
        s.push_str(&l);
        s.push('\n');
    }
    for (name, st) in ports {
        s.push_str(&format!(
            "chan.{name}.data_tx={} chan.{name}.data_rx={} chan.{name}.sync_tx={} chan.{name}.sync_rx={}\n",
            st.data_tx, st.data_rx, st.sync_tx, st.sync_rx
        ));
    }
    s
}

/// Outcome of comparing two runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DiffReport {
    Identical { components: usize },
    ComponentSets { only_a: Vec<String>, only_b: Vec<String> },
    Diverged { component: String, divergence: Divergence },
}

impl DiffReport {
    pub fn identical(&self) -> bool {
        matches!(self, DiffReport::Identical { .. })
    }
}

/// Canonical trace of one component in a run directory.
pub fn canonical_trace(dir: &RunDir, id: &str, strict: bool) -> Result<String, OrchestrateError> {
    let raw = dir.read_trace(id)?;
    trace::canonicalize(&raw, strict)
        .map_err(|e| OrchestrateError::BadTrace { path: dir.trace(id), reason: e.to_string() })
}

/// Compares canonical traces component by component.
pub fn diff_runs(a: &Path, b: &Path, strict: bool) -> Result<DiffReport, OrchestrateError> {
    let (da, db) = (RunDir::new(a), RunDir::new(b));
    let (ia, ib) = (da.trace_ids()?, db.trace_ids()?);
    if ia != ib {
        let only_a = ia.iter().filter(|i| !ib.contains(i)).cloned().collect();
        let only_b = ib.iter().filter(|i| !ia.contains(i)).cloned().collect();
        return Ok(DiffReport::ComponentSets { only_a, only_b });
    }
    for id in &ia {
        let (ta, tb) = (canonical_trace(&da, id, strict)?, canonical_trace(&db, id, strict)?);
        if let Some(divergence) = trace::first_divergence(&ta, &tb) {
            return Ok(DiffReport::Diverged { component: id.clone(), divergence });
        }
    }
    Ok(DiffReport::Identical { components: ia.len() })
}

/// Runs `cfg` `n` times under `out_root/run<k>` and diffs every pair.
pub fn replay(
    config: &Path,
    out_root: &Path,
    n: usize,
    opts: &RunOptions,
) -> Result<Vec<(usize, usize, DiffReport)>, OrchestrateError> {
    let mut dirs = Vec::new();
    for k in 0..n {
        let d = out_root.join(format!("run{k}"));
        run(config, &d, opts)?;
        dirs.push(d);
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j, diff_runs(&dirs[i], &dirs[j], false)?));
        }
    }
    Ok(out)
}

/// Result of checking a run's traces against its channel latencies.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    /// Messages whose processing time was checked.
    pub checked: usize,
    pub violations: Vec<trace::AuditViolation>,
}

/// Checks that every data message on every synchronized channel of a run
/// was processed exactly one link latency after it was sent.
pub fn audit_run(dir: &Path) -> Result<AuditReport, OrchestrateError> {
    let dir = RunDir::new(dir);
    let cfg = ExperimentConfig::load(&dir.config()).map_err(|e| ConfigErrors(vec![e]))?;
    cfg.validate()?;
    let mut records = std::collections::HashMap::new();
    for c in &cfg.components {
        let raw = dir.read_trace(&c.id)?;
        let recs = trace::parse(&raw).map_err(|e| OrchestrateError::BadTrace { path: dir.trace(&c.id), reason: e.to_string() })?;
        records.insert(c.id.clone(), recs);
    }
    let pick = |ep: &str, d: trace::Direction| -> Vec<trace::TraceRecord> {
        let (comp, port) = ep.split_once('.').expect("validated endpoint");
        records[comp].iter().filter(|r| r.channel == port && r.dir == d && !r.is_sync()).cloned().collect()
    };
    let mut report = AuditReport::default();
    for ch in cfg.channels.iter().filter(|c| c.params.synchronized) {
        for (from, to) in [(&ch.a, &ch.b), (&ch.b, &ch.a)] {
            let name = format!("{from}->{to}");
            let sent = pick(from, trace::Direction::Tx);
            let received = pick(to, trace::Direction::Rx);
            match trace::audit_latency(&name, &sent, &received, ch.params.latency(), crate::proto::SimTime(cfg.duration_ns)) {
                Ok(n) => report.checked += n,
                Err(v) => {
                    report.checked += received.len();
                    report.violations.extend(v);
                }
            }
        }
    }
    Ok(report)
}
