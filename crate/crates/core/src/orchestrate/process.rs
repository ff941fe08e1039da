//! Multi-process runs: the supervisor and the per-component entry point.
//!
//! Every child runs with the run directory as its working directory, so
//! socket and shared-memory names stay short and relative. A channel's `a`
//! side listens and its `b` side connects (retrying until the socket exists),
//! which lets all processes start at once in any order.

use std::fs::{self, File};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::config::Topology;
use super::{io_err, result_lines, trace_options, AnyModel, ExperimentConfig, OrchestrateError, RunArtifacts, RunDir};
use crate::proto::{ChannelParams, SimTime};
use crate::shmq::{ChannelEndpoint, Listener, PendingConnect, ShmError};
use crate::sync::{Kernel, KernelOptions, Model};
use crate::trace::Tracer;

const START_FILE: &str = "start";
const POLL: Duration = Duration::from_millis(5);

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Program launched for components and proxies unless a component names
    /// its own binary.
    pub exe: PathBuf,
    /// How long processes may take to connect and report ready.
    pub startup_timeout: Duration,
    /// Overrides the configured progress watchdog.
    pub watchdog: Option<Duration>,
}

impl RunOptions {
    pub fn new(exe: impl Into<PathBuf>) -> Self {
        RunOptions { exe: exe.into(), startup_timeout: Duration::from_secs(30), watchdog: None }
    }
}

fn sock_name(channel: usize, side: usize, proxied: bool) -> String {
    match (proxied, side) {
        (false, _) => format!("ch{channel}.sock"),
        (true, 0) => format!("ch{channel}.a.sock"),
        (true, _) => format!("ch{channel}.b.sock"),
    }
}

fn ready_name(id: &str) -> String {
    format!("{id}.ready")
}

fn progress_name(id: &str) -> String {
    format!("{id}.progress")
}

fn proxy_id(channel: usize, side: usize) -> String {
    format!("proxy-ch{channel}-{}", if side == 0 { 'a' } else { 'b' })
}

fn params_args(p: &ChannelParams) -> Vec<String> {
    let mut v = vec![
        "--link-latency-ns".into(),
        p.link_latency_ns.to_string(),
        "--sync-interval-ns".into(),
        p.sync_interval_ns.to_string(),
        "--slot-size".into(),
        p.slot_size_bytes.to_string(),
        "--queue-len".into(),
        p.queue_len_slots.to_string(),
    ];
    if !p.synchronized {
        v.push("--unsynchronized".into());
    }
    v
}

/// Entry point of a component process started by [`run`]; the working
/// directory must be the run's `run/` directory.
pub fn component_main(config: &Path, id: &str, out: &Path, startup_timeout: Duration) -> Result<(), OrchestrateError> {
    let cfg = ExperimentConfig::load(config).map_err(|e| super::ConfigErrors(vec![e]))?;
    let topo = cfg.validate()?;
    let idx = cfg.component_index(id).ok_or_else(|| OrchestrateError::UnknownComponent(id.into()))?;
    let spec = &cfg.components[idx];
    let dir = RunDir::new(out);
    let fail = |source| OrchestrateError::Sync { id: id.into(), source };
    let chan_fail = |port: &str, reason: String| OrchestrateError::Channel { id: id.into(), port: port.into(), reason };

    let ports = spec.kind.ports();
    enum Pending {
        Listen(Listener),
        Connect(PendingConnect),
    }
    let mut pending = Vec::new();
    for (p, (name, _)) in ports.iter().enumerate() {
        let (ch, side) = topo.ports[idx][p];
        let spec_ch = &cfg.channels[ch];
        let sock = sock_name(ch, side, spec_ch.via_proxy.is_some());
        let shm_fail = |e: ShmError| chan_fail(name, e.to_string());
        pending.push(if side == 0 {
            Pending::Listen(Listener::bind(&sock, spec_ch.params).map_err(shm_fail)?)
        } else {
            Pending::Connect(PendingConnect::start_retrying(&sock, startup_timeout).map_err(shm_fail)?)
        });
    }
    let mut endpoints: Vec<ChannelEndpoint> = Vec::new();
    for (p, pend) in pending.into_iter().enumerate() {
        let name = ports[p].0.as_str();
        let shm_fail = |e: ShmError| chan_fail(name, e.to_string());
        let ep = match pend {
            Pending::Listen(l) => {
                let shm = l.default_shm_path();
                l.accept(shm).map_err(shm_fail)?
            }
            Pending::Connect(c) => c.finish().map_err(shm_fail)?,
        };
        let (ch, _) = topo.ports[idx][p];
        if ep.params != cfg.channels[ch].params {
            let reason = format!("peer advertised {:?}, configured {:?}", ep.params, cfg.channels[ch].params);
            return Err(chan_fail(name, reason));
        }
        endpoints.push(ep);
    }

    let tracer = Tracer::file(id, &dir.trace(id), trace_options(&cfg)).map_err(io_err(&dir.trace(id)))?;
    let model = AnyModel::build(&spec.kind).map_err(|e| OrchestrateError::Build { id: id.into(), reason: e.to_string() })?;
    let progress = PathBuf::from(progress_name(id));
    let opts = KernelOptions {
        watchdog: Duration::from_millis(cfg.watchdog_ms),
        progress: Some(Box::new(move |t: SimTime| {
            let _ = fs::write(&progress, format!("{}\n", t.0));
        })),
        ..Default::default()
    };
    let mut kernel = Kernel::new(model, tracer).with_options(opts);
    for (ep, (name, _)) in endpoints.into_iter().zip(&ports) {
        let params = ep.params;
        kernel.attach_peer(name.as_str(), params, ep).map_err(fail)?;
    }

    fs::write(ready_name(id), b"ready\n").map_err(io_err(Path::new(&ready_name(id))))?;
    let deadline = Instant::now() + startup_timeout;
    while !Path::new(START_FILE).exists() {
        if Instant::now() > deadline {
            return Err(OrchestrateError::StartupTimeout(vec![START_FILE.into()]));
        }
        thread::sleep(Duration::from_millis(1));
    }

    kernel.run(SimTime(cfg.duration_ns)).map_err(fail)?;
    let stats: Vec<_> = (0..kernel.port_count()).map(|p| (kernel.port_name(p).to_string(), kernel.stats(p))).collect();
    let (model, _) = kernel.into_parts();
    let result = dir.result(id);
    fs::write(&result, result_lines(model.report(), &stats)).map_err(io_err(&result))
}

struct Proc {
    id: String,
    child: Child,
    done: bool,
}

fn kill_all(procs: &mut [Proc]) {
    for p in procs.iter_mut().filter(|p| !p.done) {
        let _ = p.child.kill();
        let _ = p.child.wait();
        p.done = true;
    }
}

fn spawn(dir: &RunDir, id: &str, program: &Path, args: &[String]) -> Result<Proc, OrchestrateError> {
    let log = dir.log(id);
    let out = File::create(&log).map_err(io_err(&log))?;
    let err = out.try_clone().map_err(io_err(&log))?;
    let child = Command::new(program)
        .args(args)
        .current_dir(dir.run_dir())
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .spawn()
        .map_err(|e| OrchestrateError::SpawnFailed { id: id.into(), reason: format!("{}: {e}", program.display()) })?;
    log::debug!("spawned {id} as pid {}", child.id());
    Ok(Proc { id: id.into(), child, done: false })
}

fn free_port() -> Result<String, OrchestrateError> {
    let l = TcpListener::bind("127.0.0.1:0").map_err(io_err(Path::new("127.0.0.1:0")))?;
    let addr = l.local_addr().map_err(io_err(Path::new("127.0.0.1:0")))?;
    Ok(addr.to_string())
}

/// Checks children; fails on the first nonzero exit. True once all exited.
fn reap(procs: &mut [Proc]) -> Result<bool, OrchestrateError> {
    for i in 0..procs.len() {
        if procs[i].done {
            continue;
        }
        if let Some(status) = procs[i].child.try_wait().map_err(io_err(Path::new(&procs[i].id)))? {
            procs[i].done = true;
            if !status.success() {
                let id = procs[i].id.clone();
                log::error!("{id} failed with {status}");
                kill_all(procs);
                return Err(OrchestrateError::ComponentCrashed { id, code: status.code() });
            }
        }
    }
    Ok(procs.iter().all(|p| p.done))
}

/// Launches one process per component (and two per proxied channel), starts
/// them together once all are connected and waits for them to finish.
pub fn run(config: &Path, out: &Path, opts: &RunOptions) -> Result<RunArtifacts, OrchestrateError> {
    let cfg = ExperimentConfig::load(config).map_err(|e| super::ConfigErrors(vec![e]))?;
    let topo = cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let out = out.canonicalize().map_err(io_err(out))?;
    let dir = RunDir::new(&out);
    let rd = dir.run_dir();
    if rd.exists() {
        fs::remove_dir_all(&rd).map_err(io_err(&rd))?;
    }
    dir.create()?;
    fs::write(dir.config(), cfg.to_toml()).map_err(io_err(&dir.config()))?;

    let cores = thread::available_parallelism().map_or(1, |n| n.get());
    let nprocs = cfg.components.len() + 2 * cfg.channels.iter().filter(|c| c.via_proxy.is_some()).count();
    if nprocs > cores {
        log::warn!("{nprocs} processes on {cores} cores; expect slow progress");
    }

    let started = Instant::now();
    let mut procs = Vec::new();
    let mut waiting = Vec::new();
    let result = launch(&cfg, &topo, &dir, opts, &mut procs, &mut waiting)
        .and_then(|()| supervise(&cfg, &dir, opts, &mut procs, &waiting));
    if result.is_err() {
        kill_all(&mut procs);
    }
    result?;
    let wall = started.elapsed();

    let mut summary = format!("name={}\nmode=processes\nstatus=ok\nwall_ms={}\n", cfg.name, wall.as_millis());
    for p in &mut procs {
        let code = p.child.wait().ok().and_then(|s| s.code());
        summary.push_str(&format!("exit.{}={}\n", p.id, code.map_or("signal".into(), |c| c.to_string())));
    }
    fs::write(dir.summary(), summary).map_err(io_err(&dir.summary()))?;
    Ok(RunArtifacts { dir, ids: cfg.components.iter().map(|c| c.id.clone()).collect(), wall })
}

fn launch(
    cfg: &ExperimentConfig,
    topo: &Topology,
    dir: &RunDir,
    opts: &RunOptions,
    procs: &mut Vec<Proc>,
    waiting: &mut Vec<String>,
) -> Result<(), OrchestrateError> {
    let startup = (opts.startup_timeout * 2).as_millis().to_string();
    let config = dir.config().to_string_lossy().into_owned();
    let root = dir.root.to_string_lossy().into_owned();
    for c in &cfg.components {
        let program = c.binary.as_deref().unwrap_or(&opts.exe);
        let args: Vec<String> = vec![
            "component".into(),
            config.clone(),
            "--id".into(),
            c.id.clone(),
            "--out".into(),
            root.clone(),
            "--startup-timeout-ms".into(),
            startup.clone(),
        ];
        procs.push(spawn(dir, &c.id, program, &args)?);
        waiting.push(c.id.clone());
    }
    for (ci, ch) in cfg.channels.iter().enumerate() {
        let Some(px) = &ch.via_proxy else { continue };
        let addr = match &px.addr {
            Some(a) => a.clone(),
            None => free_port()?,
        };
        debug_assert_eq!(topo.channels[ci].len(), 2);
        for side in 0..2 {
            let id = proxy_id(ci, side);
            let (tcp_flag, chan_role) = if side == 0 { ("--listen", "connect") } else { ("--connect", "listen") };
            let mut args: Vec<String> = vec![
                "proxy".into(),
                tcp_flag.into(),
                addr.clone(),
                "--chan".into(),
                sock_name(ci, side, true),
                "--chan-role".into(),
                chan_role.into(),
                "--ready".into(),
                ready_name(&id),
                "--connect-timeout-ms".into(),
                startup.clone(),
            ];
            args.extend(params_args(&ch.params));
            procs.push(spawn(dir, &id, &opts.exe, &args)?);
            waiting.push(id);
        }
    }
    Ok(())
}

fn supervise(
    cfg: &ExperimentConfig,
    dir: &RunDir,
    opts: &RunOptions,
    procs: &mut [Proc],
    waiting: &[String],
) -> Result<(), OrchestrateError> {
    let rd = dir.run_dir();
    let deadline = Instant::now() + opts.startup_timeout;
    loop {
        let missing: Vec<String> = waiting.iter().filter(|id| !rd.join(ready_name(id)).exists()).cloned().collect();
        if missing.is_empty() {
            break;
        }
        reap(procs)?;
        if Instant::now() > deadline {
            return Err(OrchestrateError::StartupTimeout(missing));
        }
        thread::sleep(POLL);
    }
    let start = rd.join(START_FILE);
    fs::write(&start, b"go\n").map_err(io_err(&start))?;
    log::info!("{}: all {} processes ready, started", cfg.name, procs.len());

    let watchdog = opts.watchdog.unwrap_or(Duration::from_millis(cfg.watchdog_ms));
    let mut snapshot: Vec<Option<String>> = Vec::new();
    let mut last_change = Instant::now();
    loop {
        if reap(procs)? {
            return Ok(());
        }
        let now: Vec<Option<String>> =
            cfg.components.iter().map(|c| fs::read_to_string(rd.join(progress_name(&c.id))).ok()).collect();
        if now != snapshot {
            snapshot = now;
            last_change = Instant::now();
        } else if last_change.elapsed() > watchdog {
            log::error!("no progress for {watchdog:?}, killing all processes");
            kill_all(procs);
            return Err(OrchestrateError::WatchdogTimeout(watchdog));
        }
        thread::sleep(POLL);
    }
}
