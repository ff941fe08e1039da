//! In-process runners: the single-queue monolith and one thread per
//! component over in-memory channels.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use super::{io_err, result_lines, trace_options, AnyModel, ExperimentConfig, OrchestrateError, RunArtifacts, RunDir};
use crate::proto::SimTime;
use crate::sync::{local_pair, Kernel, KernelOptions, LocalEndpoint, Model, Monolith, SyncError};
use crate::trace::Tracer;

fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<(RunDir, super::config::Topology), OrchestrateError> {
    let topo = cfg.validate()?;
    let dir = RunDir::new(out);
    dir.create()?;
    fs::write(dir.config(), cfg.to_toml()).map_err(io_err(&dir.config()))?;
    Ok((dir, topo))
}

fn summary(dir: &RunDir, cfg: &ExperimentConfig, mode: &str, wall: Duration) -> Result<(), OrchestrateError> {
    let text = format!("name={}\nmode={mode}\nstatus=ok\nwall_ms={}\n", cfg.name, wall.as_millis());
    fs::write(dir.summary(), text).map_err(io_err(&dir.summary()))
}

fn build(cfg: &ExperimentConfig, idx: usize) -> Result<AnyModel, OrchestrateError> {
    let c = &cfg.components[idx];
    AnyModel::build(&c.kind).map_err(|e| OrchestrateError::Build { id: c.id.clone(), reason: e.to_string() })
}

/// Runs the whole topology on one event queue.
pub fn run_monolith(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts, OrchestrateError> {
    let (dir, topo) = prepare(cfg, out)?;
    let started = Instant::now();
    let mut mono = Monolith::new();
    for (i, c) in cfg.components.iter().enumerate() {
        let tracer = Tracer::file(c.id.as_str(), &dir.trace(&c.id), trace_options(cfg))
            .map_err(io_err(&dir.trace(&c.id)))?;
        let idx = mono.add_component(c.id.as_str(), build(cfg, i)?, tracer);
        for (p, (name, _)) in c.kind.ports().iter().enumerate() {
            let (ch, _) = topo.ports[i][p];
            mono.add_port(idx, name, cfg.channels[ch].params)?;
        }
    }
    for [a, b] in &topo.channels {
        mono.connect(*a, *b)?;
    }
    mono.run(SimTime(cfg.duration_ns))?;
    let wall = started.elapsed();
    for (id, core) in mono.into_cores() {
        let ports: Vec<_> =
            (0..core.port_count()).map(|p| (core.port_name(p).to_string(), core.stats(p))).collect();
        let (model, _) = core.into_parts();
        let p = dir.result(&id);
        fs::write(&p, result_lines(model.report(), &ports)).map_err(io_err(&p))?;
    }
    summary(&dir, cfg, "monolith", wall)?;
    Ok(RunArtifacts { dir, ids: cfg.components.iter().map(|c| c.id.clone()).collect(), wall })
}

/// Runs every component on its own thread with its own kernel, connected by
/// in-memory channels.
pub fn run_threaded(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts, OrchestrateError> {
    let (dir, topo) = prepare(cfg, out)?;
    let started = Instant::now();
    let mut ends: Vec<[Option<LocalEndpoint>; 2]> = cfg
        .channels
        .iter()
        .map(|ch| {
            let (a, b) = local_pair(&ch.params);
            [Some(a), Some(b)]
        })
        .collect();
    let watchdog = Duration::from_millis(cfg.watchdog_ms);
    let mut handles = Vec::new();
    for (i, c) in cfg.components.iter().enumerate() {
        let tracer = Tracer::file(c.id.as_str(), &dir.trace(&c.id), trace_options(cfg))
            .map_err(io_err(&dir.trace(&c.id)))?;
        let opts = KernelOptions { watchdog, ..Default::default() };
        let mut kernel = Kernel::new(build(cfg, i)?, tracer).with_options(opts);
        for (p, (name, _)) in c.kind.ports().iter().enumerate() {
            let (ch, side) = topo.ports[i][p];
            let ep = ends[ch][side].take().expect("each end used once");
            kernel
                .attach_peer(name.as_str(), cfg.channels[ch].params, ep)
                .map_err(|source| OrchestrateError::Sync { id: c.id.clone(), source })?;
        }
        let until = SimTime(cfg.duration_ns);
        let id = c.id.clone();
        let result = dir.result(&id);
        let h = thread::Builder::new()
            .name(id.clone())
            .spawn(move || -> Result<(), OrchestrateError> {
                kernel.run(until).map_err(|source| OrchestrateError::Sync { id: id.clone(), source })?;
                let ports: Vec<_> = (0..kernel.port_count())
                    .map(|p| (kernel.port_name(p).to_string(), kernel.stats(p)))
                    .collect();
                let (model, _) = kernel.into_parts();
                fs::write(&result, result_lines(model.report(), &ports)).map_err(io_err(&result))
            })
            .map_err(io_err(&dir.root))?;
        handles.push(h);
    }
    let errs: Vec<_> =
        handles.into_iter().filter_map(|h| h.join().expect("component thread panicked").err()).collect();
    // Neighbours of a failed component report a lost peer; show the cause.
    let secondary = |e: &OrchestrateError| {
        matches!(e, OrchestrateError::Sync { source: SyncError::PeerLost { .. } | SyncError::Channel { .. }, .. })
    };
    if let Some(i) = errs.iter().position(|e| !secondary(e)).or(if errs.is_empty() { None } else { Some(0) }) {
        return Err(errs.into_iter().nth(i).unwrap());
    }
    let wall = started.elapsed();
    summary(&dir, cfg, "threaded", wall)?;
    Ok(RunArtifacts { dir, ids: cfg.components.iter().map(|c| c.id.clone()).collect(), wall })
}
