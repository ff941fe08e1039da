use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sbrk_core::orchestrate::{self, DiffReport, ExperimentConfig, RunOptions};
use sbrk_core::proto::ChannelParams;
use sbrk_core::proxy::{self, ChanRole, ProxyOptions, TcpRole};

/// Run and verify modular network-system simulations.
#[derive(Parser)]
#[command(name = "sbrk", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Launch every component as its own process and wait for the run to end.
    Run {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30_000)]
        startup_timeout_ms: u64,
        /// Overrides the config's watchdog_ms.
        #[arg(long)]
        watchdog_ms: Option<u64>,
    },
    /// Check a configuration without running it.
    Validate { config: PathBuf },
    /// Compare the canonical traces of two run directories.
    Diff {
        a: PathBuf,
        b: PathBuf,
        /// Include SYNC records.
        #[arg(long)]
        strict: bool,
    },
    /// Run the whole topology in this process on one event queue.
    Monolith {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run a configuration k times and diff all runs pairwise.
    Replay {
        config: PathBuf,
        #[arg(short = 'n', default_value_t = 2)]
        runs: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check every message latency recorded in a run directory.
    Audit { dir: PathBuf },
    #[command(hide = true)]
    Component {
        config: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30_000)]
        startup_timeout_ms: u64,
    },
    #[command(hide = true)]
    Proxy(ProxyArgs),
}

#[derive(Args)]
struct ProxyArgs {
    #[arg(long, conflicts_with = "connect", required_unless_present = "connect")]
    listen: Option<String>,
    #[arg(long)]
    connect: Option<String>,
    /// Socket of the local component.
    #[arg(long)]
    chan: PathBuf,
    /// Whether the proxy listens on or connects to `--chan`.
    #[arg(long, value_parser = ["listen", "connect"])]
    chan_role: String,
    #[arg(long)]
    ready: Option<PathBuf>,
    #[arg(long, default_value_t = 30_000)]
    connect_timeout_ms: u64,
    #[arg(long, default_value_t = 500)]
    link_latency_ns: u64,
    #[arg(long, default_value_t = 500)]
    sync_interval_ns: u64,
    #[arg(long, default_value_t = 4096)]
    slot_size: u32,
    #[arg(long, default_value_t = 256)]
    queue_len: u32,
    #[arg(long)]
    unsynchronized: bool,
}

fn print_diff(report: &DiffReport) -> bool {
    match report {
        DiffReport::Identical { components } => {
            println!("identical ({components} components)");
            true
        }
        DiffReport::ComponentSets { only_a, only_b } => {
            println!("component sets differ: only in a: {only_a:?}, only in b: {only_b:?}");
            false
        }
        DiffReport::Diverged { component, divergence } => {
            println!("{component}: first divergence at canonical line {}", divergence.line);
            println!("< {}", divergence.left.as_deref().unwrap_or("<end of trace>"));
            println!("> {}", divergence.right.as_deref().unwrap_or("<end of trace>"));
            false
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Run { config, out, startup_timeout_ms, watchdog_ms } => {
            let mut opts = RunOptions::new(std::env::current_exe()?);
            opts.startup_timeout = Duration::from_millis(startup_timeout_ms);
            opts.watchdog = watchdog_ms.map(Duration::from_millis);
            let art = orchestrate::run(&config, &out, &opts)?;
            println!("ok: {} components in {:.3}s, artifacts in {}", art.ids.len(), art.wall.as_secs_f64(), out.display());
            Ok(true)
        }
        Cmd::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            match cfg.validate() {
                Ok(topo) => {
                    println!("ok: {} components, {} channels", cfg.components.len(), topo.channels.len());
                    Ok(true)
                }
                Err(errs) => {
                    for e in &errs.0 {
                        println!("error: {e}");
                    }
                    Ok(false)
                }
            }
        }
        Cmd::Diff { a, b, strict } => Ok(print_diff(&orchestrate::diff_runs(&a, &b, strict)?)),
        Cmd::Monolith { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let art = orchestrate::run_monolith(&cfg, &out)?;
            println!("ok: {} components in {:.3}s, artifacts in {}", art.ids.len(), art.wall.as_secs_f64(), out.display());
            Ok(true)
        }
        Cmd::Replay { config, runs, out } => {
            if runs < 2 {
                bail!("replay needs at least two runs");
            }
            let opts = RunOptions::new(std::env::current_exe()?);
            let mut all = true;
            for (i, j, report) in orchestrate::replay(&config, &out, runs, &opts)? {
                print!("run{i} vs run{j}: ");
                all &= print_diff(&report);
            }
            Ok(all)
        }
        Cmd::Audit { dir } => {
            let report = orchestrate::audit_run(&dir)?;
            for v in &report.violations {
                println!("violation: {v:?}");
            }
            println!("checked={} violations={}", report.checked, report.violations.len());
            Ok(report.violations.is_empty())
        }
        Cmd::Component { config, id, out, startup_timeout_ms } => {
            orchestrate::component_main(&config, &id, &out, Duration::from_millis(startup_timeout_ms))
                .with_context(|| format!("component {id}"))?;
            Ok(true)
        }
        Cmd::Proxy(a) => {
            let tcp = match (a.listen, a.connect) {
                (Some(l), _) => TcpRole::Listen(l),
                (None, Some(c)) => TcpRole::Connect(c),
                (None, None) => unreachable!("clap requires one"),
            };
            let opts = ProxyOptions {
                tcp,
                chan: a.chan,
                chan_role: if a.chan_role == "listen" { ChanRole::Listen } else { ChanRole::Connect },
                params: ChannelParams {
                    link_latency_ns: a.link_latency_ns,
                    sync_interval_ns: a.sync_interval_ns,
                    slot_size_bytes: a.slot_size,
                    queue_len_slots: a.queue_len,
                    synchronized: !a.unsynchronized,
                },
                connect_timeout: Duration::from_millis(a.connect_timeout_ms),
                ready_file: a.ready,
            };
            let stats = proxy::run(&opts)?;
            log::info!(
                "proxy done: out {} msgs in {} frames, in {} msgs in {} frames",
                stats.to_tcp.messages,
                stats.to_tcp.frames,
                stats.from_tcp.messages,
                stats.from_tcp.frames
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SBRK_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
