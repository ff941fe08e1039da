use std::fmt;
use std::time::{Duration, Instant};

use super::{ComponentCore, EventClass, EventKey, Model, PortId, PortStats, SyncError};
use crate::backoff::Backoff;
use crate::proto::{ChannelParams, Message, SimTime, WireMessage};
use crate::shmq::{ChannelEndpoint, ChannelError};
use crate::trace::Tracer;

/// Message transport under one kernel port.
pub trait Transport: Send {
    /// Blocks while the queue is full.
    fn send(&mut self, msg: &WireMessage) -> Result<(), ChannelError>;
    fn try_recv(&mut self) -> Result<Option<WireMessage>, ChannelError>;
    fn peer_alive(&self) -> bool;
}

impl Transport for ChannelEndpoint {
    fn send(&mut self, msg: &WireMessage) -> Result<(), ChannelError> {
        ChannelEndpoint::send(self, msg)
    }
    fn try_recv(&mut self) -> Result<Option<WireMessage>, ChannelError> {
        Ok(ChannelEndpoint::try_recv(self)?)
    }
    fn peer_alive(&self) -> bool {
        ChannelEndpoint::peer_alive(self)
    }
}

pub struct KernelOptions {
    /// Wall-clock time without any executed event before giving up.
    pub watchdog: Duration,
    /// Called with the current virtual time at most every `progress_every`.
    pub progress: Option<Box<dyn FnMut(SimTime) + Send>>,
    pub progress_every: Duration,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions { watchdog: Duration::from_secs(30), progress: None, progress_every: Duration::from_millis(200) }
    }
}

impl fmt::Debug for KernelOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelOptions").field("watchdog", &self.watchdog).finish_non_exhaustive()
    }
}

struct Peer {
    transport: Box<dyn Transport>,
    synchronized: bool,
    horizon: SimTime,
    pending: Option<WireMessage>,
    /// Peer's end-of-run marker seen.
    finished: bool,
}

/// The per-component event loop over real transports.
pub struct Kernel<M> {
    core: ComponentCore<M>,
    peers: Vec<Peer>,
    opts: KernelOptions,
    last_progress: Instant,
}

const END_MARKER: SimTime = SimTime::MAX;
const CANARY_EVERY: Duration = Duration::from_millis(20);

impl<M: Model> Kernel<M> {
    pub fn new(model: M, tracer: Tracer) -> Self {
        Kernel {
            core: ComponentCore::new(model, tracer),
            peers: Vec::new(),
            opts: KernelOptions::default(),
            last_progress: Instant::now(),
        }
    }

    pub fn with_options(mut self, opts: KernelOptions) -> Self {
        self.opts = opts;
        self
    }

    /// Registers a channel. Port ids are assigned in attach order.
    pub fn attach_peer(
        &mut self,
        channel: impl Into<String>,
        params: ChannelParams,
        transport: impl Transport + 'static,
    ) -> Result<PortId, SyncError> {
        let port = self.core.add_port(channel, params)?;
        self.peers.push(Peer {
            transport: Box::new(transport),
            synchronized: params.synchronized,
            horizon: SimTime::ZERO,
            pending: None,
            finished: false,
        });
        Ok(port)
    }

    pub fn now(&self) -> SimTime {
        self.core.now()
    }

    pub fn model(&self) -> &M {
        self.core.model()
    }

    pub fn stats(&self, port: PortId) -> PortStats {
        self.core.stats(port)
    }

    pub fn port_count(&self) -> usize {
        self.core.port_count()
    }

    pub fn port_name(&self, port: PortId) -> &str {
        self.core.port_name(port)
    }

    pub fn horizon(&self, port: PortId) -> SimTime {
        self.peers[port].horizon
    }

    pub fn tracer(&self) -> &Tracer {
        self.core.tracer()
    }

    pub fn into_parts(self) -> (M, Tracer) {
        self.core.into_parts()
    }

    /// Runs every event strictly before `until`, then exchanges end markers
    /// with all peers.
    pub fn run(&mut self, until: SimTime) -> Result<(), SyncError> {
        if self.core.started() {
            return Err(SyncError::AttachAfterStart);
        }
        self.core.start()?;
        self.flush()?;
        let mut backoff = Backoff::new();
        let mut last_event = Instant::now();
        let mut last_canary = Instant::now();
        loop {
            self.poll_all()?;
            let next = self.next_event();
            if let Some(key) = next {
                if key.time < until && self.safe(key) {
                    self.execute(key)?;
                    self.flush()?;
                    self.report_progress(false);
                    backoff.reset();
                    last_event = Instant::now();
                    continue;
                }
            }
            let horizon = super::next_safe_horizon(self.peers.iter().map(|p| (p.synchronized, p.horizon)));
            if horizon >= until && next.is_none_or(|k| k.time >= until) {
                break;
            }
            backoff.snooze();
            if last_event.elapsed() > self.opts.watchdog {
                return Err(SyncError::DeadlockTimeout { now: self.core.now(), waited: last_event.elapsed() });
            }
            if last_canary.elapsed() > CANARY_EVERY {
                last_canary = Instant::now();
                self.check_peers()?;
            }
        }
        self.report_progress(true);
        self.drain()?;
        self.core.finish()
    }

    fn report_progress(&mut self, force: bool) {
        if let Some(cb) = self.opts.progress.as_mut() {
            if force || self.last_progress.elapsed() >= self.opts.progress_every {
                self.last_progress = Instant::now();
                cb(self.core.now());
            }
        }
    }

    fn poll_all(&mut self) -> Result<(), SyncError> {
        for port in 0..self.peers.len() {
            let peer = &mut self.peers[port];
            if peer.pending.is_some() || peer.finished {
                continue;
            }
            let Some(msg) = peer.transport.try_recv().map_err(|source| SyncError::Channel {
                channel: self.core.port_name(port).to_string(),
                source,
            })?
            else {
                continue;
            };
            if msg.timestamp == END_MARKER && msg.body == Message::Sync {
                peer.finished = true;
                peer.horizon = END_MARKER;
                continue;
            }
            if peer.synchronized {
                let now = self.core.now();
                if msg.timestamp < peer.horizon || msg.timestamp < now {
                    return Err(SyncError::CausalityViolation {
                        channel: self.core.port_name(port).to_string(),
                        timestamp: msg.timestamp,
                        horizon: peer.horizon,
                        now,
                    });
                }
                peer.horizon = msg.timestamp;
            }
            peer.pending = Some(msg);
        }
        Ok(())
    }

    fn next_event(&self) -> Option<EventKey> {
        let now = self.core.now();
        let inbound = self.peers.iter().enumerate().filter_map(|(i, p)| {
            p.pending.as_ref().map(|m| EventKey {
                time: if p.synchronized { m.timestamp } else { now },
                class: EventClass::Inbound,
                port: i,
                seq: 0,
            })
        });
        inbound.chain(self.core.next_local()).min()
    }

    /// An event at `T` may run once no synchronized peer can still send
    /// anything that orders before it: every horizon must reach `T`, and for
    /// an inbound event from port `q`, peers with a lower index must be past
    /// `T`.
    fn safe(&self, key: EventKey) -> bool {
        if key.class == EventClass::Inbound && !self.peers[key.port].synchronized {
            return true;
        }
        self.peers.iter().enumerate().filter(|(_, p)| p.synchronized).all(|(i, p)| {
            if key.class == EventClass::Inbound && i < key.port {
                p.horizon > key.time
            } else {
                p.horizon >= key.time
            }
        })
    }

    fn execute(&mut self, key: EventKey) -> Result<(), SyncError> {
        match key.class {
            EventClass::Inbound => {
                let msg = self.peers[key.port].pending.take().expect("pending message");
                self.core.deliver(key.port, msg, key.time)
            }
            _ => self.core.run_local(key),
        }
    }

    fn flush(&mut self) -> Result<(), SyncError> {
        let Kernel { core, peers, .. } = self;
        let mut failed = None;
        for (port, msg) in core.drain_outbox() {
            if failed.is_none() {
                if let Err(e) = peers[port].transport.send(&msg) {
                    failed = Some((port, e));
                }
            }
        }
        match failed {
            Some((port, source)) => {
                Err(SyncError::Channel { channel: self.core.port_name(port).to_string(), source })
            }
            None => Ok(()),
        }
    }

    /// Fails if a peer we still need has exited and left nothing behind.
    fn check_peers(&mut self) -> Result<(), SyncError> {
        for port in 0..self.peers.len() {
            let p = &self.peers[port];
            if p.finished || p.pending.is_some() || p.transport.peer_alive() {
                continue;
            }
            self.poll_all()?;
            let p = &self.peers[port];
            if !p.finished && p.pending.is_none() {
                return Err(SyncError::PeerLost { channel: self.core.port_name(port).to_string() });
            }
        }
        Ok(())
    }

    /// Sends our end marker everywhere and discards input until every peer's
    /// marker arrived, so no peer exits while the other still needs it.
    fn drain(&mut self) -> Result<(), SyncError> {
        let marker = WireMessage::new(END_MARKER, Message::Sync);
        for port in 0..self.peers.len() {
            self.peers[port].transport.send(&marker).map_err(|source| SyncError::Channel {
                channel: self.core.port_name(port).to_string(),
                source,
            })?;
        }
        let mut backoff = Backoff::new();
        let started = Instant::now();
        let mut last_canary = Instant::now();
        loop {
            let mut idle = true;
            for port in 0..self.peers.len() {
                let peer = &mut self.peers[port];
                peer.pending = None;
                while !peer.finished {
                    match peer.transport.try_recv() {
                        Ok(Some(m)) => {
                            idle = false;
                            if m.timestamp == END_MARKER && m.body == Message::Sync {
                                peer.finished = true;
                            }
                        }
                        Ok(None) => break,
                        Err(source) => {
                            return Err(SyncError::Channel {
                                channel: self.core.port_name(port).to_string(),
                                source,
                            })
                        }
                    }
                }
            }
            if self.peers.iter().all(|p| p.finished) {
                return Ok(());
            }
            if !idle {
                backoff.reset();
                continue;
            }
            backoff.snooze();
            if started.elapsed() > self.opts.watchdog {
                return Err(SyncError::DeadlockTimeout { now: self.core.now(), waited: started.elapsed() });
            }
            if last_canary.elapsed() > CANARY_EVERY {
                last_canary = Instant::now();
                for (port, p) in self.peers.iter_mut().enumerate() {
                    if !p.finished && !p.transport.peer_alive() {
                        let mut got_marker = false;
                        while let Ok(Some(m)) = p.transport.try_recv() {
                            got_marker |= m.timestamp == END_MARKER && m.body == Message::Sync;
                        }
                        if !got_marker {
                            return Err(SyncError::PeerLost { channel: self.core.port_name(port).to_string() });
                        }
                        p.finished = true;
                    }
                }
            }
        }
    }
}
