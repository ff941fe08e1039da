use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{Context, Effect, EventClass, EventKey, Model, PortId, SyncError};
use crate::proto::{self, ChannelParams, CodecError, Message, SimTime, WireMessage, HEADER_LEN};
use crate::trace::{Direction, Tracer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PortStats {
    pub data_tx: u64,
    pub data_rx: u64,
    pub sync_tx: u64,
    pub sync_rx: u64,
}

#[derive(Debug)]
struct Port {
    name: String,
    params: ChannelParams,
    sync_due: Option<SimTime>,
    stats: PortStats,
}

/// Clock, local timers, SYNC timers and tracing of one component, without
/// any transport. Outbound messages collect in an outbox the caller drains.
///
/// The multi-process [`Kernel`](super::Kernel) and the single-process engine
/// both drive components through this type, so they produce identical traces
/// as long as they execute the same events in the same order.
pub struct ComponentCore<M> {
    model: M,
    now: SimTime,
    started: bool,
    ports: Vec<Port>,
    timers: BinaryHeap<Reverse<(SimTime, u64, u64)>>,
    timer_seq: u64,
    tracer: Tracer,
    effects: Vec<Effect>,
    outbox: Vec<(PortId, WireMessage)>,
    scratch: Vec<u8>,
}

impl<M: Model> ComponentCore<M> {
    pub fn new(model: M, tracer: Tracer) -> Self {
        ComponentCore {
            model,
            now: SimTime::ZERO,
            started: false,
            ports: Vec::new(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            tracer,
            effects: Vec::new(),
            outbox: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn add_port(&mut self, name: impl Into<String>, params: ChannelParams) -> Result<PortId, SyncError> {
        if self.started {
            return Err(SyncError::AttachAfterStart);
        }
        self.ports.push(Port { name: name.into(), params, sync_due: None, stats: PortStats::default() });
        Ok(self.ports.len() - 1)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn started(&self) -> bool {
        self.started
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn tracer_mut(&mut self) -> &mut Tracer {
        &mut self.tracer
    }

    pub fn into_parts(self) -> (M, Tracer) {
        (self.model, self.tracer)
    }

    pub fn port_count(&self) -> usize {
        self.ports.len()
    }

    pub fn port_name(&self, port: PortId) -> &str {
        &self.ports[port].name
    }

    pub fn params(&self, port: PortId) -> &ChannelParams {
        &self.ports[port].params
    }

    pub fn stats(&self, port: PortId) -> PortStats {
        self.ports[port].stats
    }

    /// Sends the initial SYNC on every synchronized port, then starts the model.
    pub fn start(&mut self) -> Result<(), SyncError> {
        assert!(!self.started, "component started twice");
        self.started = true;
        for port in 0..self.ports.len() {
            if self.ports[port].params.synchronized {
                self.emit(port, Message::Sync)?;
            }
        }
        let mut effects = std::mem::take(&mut self.effects);
        let res = self.model.start(&mut Context::new(self.now, &mut effects));
        self.apply(effects, res)
    }

    /// Earliest pending SYNC or local timer.
    pub fn next_local(&self) -> Option<EventKey> {
        let timer = self.timers.peek().map(|Reverse((t, seq, _))| EventKey {
            time: *t,
            class: EventClass::Local,
            port: 0,
            seq: *seq,
        });
        let sync = self
            .ports
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                p.sync_due.map(|t| EventKey { time: t, class: EventClass::SyncTimer, port: i, seq: 0 })
            })
            .min();
        match (timer, sync) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Runs the event `next_local` returned.
    pub fn run_local(&mut self, key: EventKey) -> Result<(), SyncError> {
        debug_assert!(key.time >= self.now);
        debug_assert_eq!(Some(key), self.next_local());
        self.now = key.time;
        match key.class {
            EventClass::SyncTimer => self.emit(key.port, Message::Sync),
            EventClass::Local => {
                let Reverse((_, _, token)) = self.timers.pop().expect("timer vanished");
                let mut effects = std::mem::take(&mut self.effects);
                let res = self.model.on_timer(&mut Context::new(self.now, &mut effects), token);
                self.apply(effects, res)
            }
            EventClass::Inbound => unreachable!("inbound events are delivered, not run"),
        }
    }

    /// Processes an inbound message at virtual time `at`.
    pub fn deliver(&mut self, port: PortId, msg: WireMessage, at: SimTime) -> Result<(), SyncError> {
        debug_assert!(at >= self.now);
        self.now = at;
        let ty = msg.body.msg_type();
        self.payload_of(port, &msg.body)?;
        let p = &mut self.ports[port];
        self.tracer.record(at, &p.name, Direction::Rx, ty.name(), &self.scratch)?;
        if msg.body.is_sync() {
            p.stats.sync_rx += 1;
            return Ok(());
        }
        p.stats.data_rx += 1;
        let mut effects = std::mem::take(&mut self.effects);
        let res = self.model.on_message(&mut Context::new(self.now, &mut effects), port, msg.body);
        self.apply(effects, res)
    }

    /// Messages emitted since the last call, in send order.
    pub fn drain_outbox(&mut self) -> std::vec::Drain<'_, (PortId, WireMessage)> {
        self.outbox.drain(..)
    }

    pub fn finish(&mut self) -> Result<(), SyncError> {
        self.tracer.flush()?;
        Ok(())
    }

    fn apply(&mut self, mut effects: Vec<Effect>, res: Result<(), super::ModelError>) -> Result<(), SyncError> {
        res.map_err(SyncError::Model)?;
        for e in effects.drain(..) {
            match e {
                Effect::Send { port, msg } => {
                    if msg.is_sync() {
                        return Err(SyncError::ModelSentSync);
                    }
                    if port >= self.ports.len() {
                        return Err(SyncError::BadPort(port));
                    }
                    self.emit(port, msg)?;
                }
                Effect::Timer { at, token } => {
                    if at < self.now {
                        return Err(SyncError::ScheduleInPast { at, now: self.now });
                    }
                    self.timers.push(Reverse((at, self.timer_seq, token)));
                    self.timer_seq += 1;
                }
                Effect::Note { label, payload } => {
                    self.tracer.record(self.now, "-", Direction::Local, label, &payload)?;
                }
            }
        }
        self.effects = effects;
        Ok(())
    }

    fn payload_of(&mut self, port: PortId, body: &Message) -> Result<(), SyncError> {
        self.scratch.clear();
        proto::encode_payload(body, &mut self.scratch)
            .map_err(|source| SyncError::Codec { channel: self.ports[port].name.clone(), source })
    }

    fn emit(&mut self, port: PortId, body: Message) -> Result<(), SyncError> {
        self.payload_of(port, &body)?;
        let p = &mut self.ports[port];
        let capacity = p.params.slot_size_bytes as usize;
        if HEADER_LEN + self.scratch.len() + 1 > capacity {
            return Err(SyncError::Codec {
                channel: p.name.clone(),
                source: CodecError::OversizedMessage { needed: HEADER_LEN + self.scratch.len() + 1, capacity },
            });
        }
        let ty = body.msg_type();
        self.tracer.record(self.now, &p.name, Direction::Tx, ty.name(), &self.scratch)?;
        if body.is_sync() {
            p.stats.sync_tx += 1;
        } else {
            p.stats.data_tx += 1;
        }
        if p.params.synchronized {
            p.sync_due = Some(self.now + p.params.sync_interval());
        }
        self.outbox.push((port, WireMessage::new(self.now + p.params.latency(), body)));
        Ok(())
    }
}
