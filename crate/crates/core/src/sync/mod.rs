//! Conservative pairwise synchronization.
//!
//! Every component embeds a [`Kernel`]: a single-threaded event loop that
//! stamps outbound messages with `now + latency`, sends SYNC messages when a
//! channel has been quiet for a sync interval, and only advances its clock to
//! `T` once every synchronized peer has promised (by having sent something
//! stamped at or after `T`) that nothing earlier will arrive.
//!
//! Component behavior lives in a [`Model`], which only sees a [`Context`] and
//! never touches channels directly. The same models run unchanged in the
//! single-process reference engine.

mod component;
mod kernel;
mod local;
mod monolith;

use std::error::Error;
use std::fmt;
use std::io;
use std::time::Duration;

use crate::proto::{CodecError, Message, SimTime};
use crate::shmq::ChannelError;

pub use component::{ComponentCore, PortStats};
pub use kernel::{Kernel, KernelOptions, Transport};
pub use local::{local_pair, LocalEndpoint};
pub use monolith::{Monolith, MonolithError};

/// Index of a channel within one component, in attach order.
pub type PortId = usize;

/// Errors raised by model callbacks.
pub type ModelError = Box<dyn Error + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventClass {
    SyncTimer = 0,
    Local = 1,
    Inbound = 2,
}

/// Total order on one component's events. At equal time, SYNC timers run
/// first, then local timers by insertion order, then inbound messages by port
/// and arrival order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventKey {
    pub time: SimTime,
    pub class: EventClass,
    pub port: PortId,
    pub seq: u64,
}

/// Minimum horizon over synchronized peers, or [`SimTime::MAX`] if there are
/// none. Each item is `(synchronized, horizon)`.
pub fn next_safe_horizon<I>(peers: I) -> SimTime
where
    I: IntoIterator<Item = (bool, SimTime)>,
{
    peers.into_iter().filter(|(s, _)| *s).map(|(_, h)| h).min().unwrap_or(SimTime::MAX)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send { port: PortId, msg: Message },
    Timer { at: SimTime, token: u64 },
    Note { label: &'static str, payload: Vec<u8> },
}

/// Handle passed to model callbacks. Effects are applied in call order after
/// the callback returns.
pub struct Context<'a> {
    now: SimTime,
    effects: &'a mut Vec<Effect>,
}

impl<'a> Context<'a> {
    pub fn new(now: SimTime, effects: &'a mut Vec<Effect>) -> Self {
        Context { now, effects }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Sends `msg` on `port`; it is delivered at `now` plus the channel latency.
    pub fn send(&mut self, port: PortId, msg: Message) {
        self.effects.push(Effect::Send { port, msg });
    }

    pub fn timer_at(&mut self, at: SimTime, token: u64) {
        self.effects.push(Effect::Timer { at, token });
    }

    pub fn timer_in(&mut self, delay_ns: u64, token: u64) {
        self.timer_at(SimTime(self.now.0 + delay_ns), token);
    }

    /// Adds a local record to the trace.
    pub fn note(&mut self, label: &'static str, payload: Vec<u8>) {
        self.effects.push(Effect::Note { label, payload });
    }
}

/// Behavior of one component simulator.
pub trait Model {
    /// Called once at time 0 after the initial SYNCs are out.
    fn start(&mut self, cx: &mut Context<'_>) -> Result<(), ModelError>;

    fn on_message(&mut self, cx: &mut Context<'_>, port: PortId, msg: Message) -> Result<(), ModelError>;

    fn on_timer(&mut self, cx: &mut Context<'_>, token: u64) -> Result<(), ModelError>;

    /// Result-file lines written when the run ends.
    fn report(&self) -> Vec<String> {
        Vec::new()
    }
}

impl<M: Model + ?Sized> Model for Box<M> {
    fn start(&mut self, cx: &mut Context<'_>) -> Result<(), ModelError> {
        (**self).start(cx)
    }
    fn on_message(&mut self, cx: &mut Context<'_>, port: PortId, msg: Message) -> Result<(), ModelError> {
        (**self).on_message(cx, port, msg)
    }
    fn on_timer(&mut self, cx: &mut Context<'_>, token: u64) -> Result<(), ModelError> {
        (**self).on_timer(cx, token)
    }
    fn report(&self) -> Vec<String> {
        (**self).report()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("peers must be attached before the simulation starts")]
    AttachAfterStart,
    #[error("causality violation on {channel}: timestamp {timestamp} after horizon {horizon} at local time {now}")]
    CausalityViolation { channel: String, timestamp: SimTime, horizon: SimTime, now: SimTime },
    #[error("no progress for {waited:?} at virtual time {now}")]
    DeadlockTimeout { now: SimTime, waited: Duration },
    #[error("peer on {channel} exited before the end of the simulation")]
    PeerLost { channel: String },
    #[error("channel {channel}: {source}")]
    Channel { channel: String, source: ChannelError },
    #[error("channel {channel}: {source}")]
    Codec { channel: String, source: CodecError },
    #[error("timer at {at} scheduled in the past (now {now})")]
    ScheduleInPast { at: SimTime, now: SimTime },
    #[error("no port {0}")]
    BadPort(PortId),
    #[error("models may not send SYNC messages")]
    ModelSentSync,
    #[error("{0}")]
    Model(ModelError),
    #[error("trace: {0}")]
    Trace(#[from] io::Error),
}

impl SyncError {
    /// The model's own error, for downcasting.
    pub fn model_error(&self) -> Option<&(dyn Error + Send + Sync + 'static)> {
        match self {
            SyncError::Model(e) => Some(e.as_ref()),
            _ => None,
        }
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventClass::SyncTimer => "sync",
            EventClass::Local => "local",
            EventClass::Inbound => "inbound",
        };
        f.write_str(s)
    }
}
