//! MAC-learning Ethernet switch with per-port egress FIFOs.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{frame_dst, frame_src, MacAddr, ETH_HEADER_LEN};
use crate::proto::{EthMsg, Message, SimTime};
use crate::sync::{Context, Model, ModelError, PortId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchConfig {
    pub ports: usize,
    pub mac_capacity: usize,
    /// Egress queue capacity in packets.
    pub queue_capacity: usize,
    pub forward_delay_ns: u64,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        SwitchConfig { ports: 2, mac_capacity: 1024, queue_capacity: 64, forward_delay_ns: 0 }
    }
}

/// Address table without aging. Once full, new addresses are not learned;
/// known ones still move.
#[derive(Debug, Clone, Default)]
pub struct MacTable {
    map: HashMap<MacAddr, PortId>,
    capacity: usize,
}

impl MacTable {
    pub fn new(capacity: usize) -> Self {
        MacTable { map: HashMap::new(), capacity }
    }

    pub fn learn(&mut self, mac: MacAddr, port: PortId) {
        if mac.is_group() {
            return;
        }
        if self.map.len() < self.capacity || self.map.contains_key(&mac) {
            self.map.insert(mac, port);
        }
    }

    pub fn lookup(&self, mac: &MacAddr) -> Option<PortId> {
        self.map.get(mac).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PortCounters {
    pub rx: u64,
    pub tx: u64,
    pub drop: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SwitchStats {
    pub ports: Vec<PortCounters>,
    /// Frames shorter than an Ethernet header.
    pub runt: u64,
    /// Unicast frames whose destination sits behind the ingress port.
    pub filtered: u64,
    /// Frames accepted for forwarding.
    pub switched: u64,
    /// Egress copies created (one per output port).
    pub copies: u64,
}

impl SwitchStats {
    /// Frames in equal frames handled, and copies equal copies sent,
    /// dropped or still queued.
    pub fn balanced(&self, queued: u64) -> bool {
        let rx: u64 = self.ports.iter().map(|p| p.rx).sum();
        let out: u64 = self.ports.iter().map(|p| p.tx + p.drop).sum();
        rx == self.runt + self.filtered + self.switched && self.copies == out + queued
    }
}

#[derive(Debug)]
pub struct Switch {
    cfg: SwitchConfig,
    table: MacTable,
    queues: Vec<VecDeque<(SimTime, Vec<u8>)>>,
    stats: SwitchStats,
}

impl Switch {
    pub fn new(cfg: SwitchConfig) -> Self {
        let ports = cfg.ports;
        Switch {
            cfg,
            table: MacTable::new(cfg.mac_capacity),
            queues: vec![VecDeque::new(); ports],
            stats: SwitchStats { ports: vec![PortCounters::default(); ports], ..Default::default() },
        }
    }

    pub fn stats(&self) -> &SwitchStats {
        &self.stats
    }

    pub fn table(&self) -> &MacTable {
        &self.table
    }

    pub fn queued(&self) -> u64 {
        self.queues.iter().map(|q| q.len() as u64).sum()
    }

    /// Output ports for a frame entering on `ingress`, after learning.
    fn egress(&mut self, frame: &[u8], ingress: PortId) -> Vec<PortId> {
        let (dst, src) = (frame_dst(frame).unwrap(), frame_src(frame).unwrap());
        self.table.learn(src, ingress);
        match (dst.is_group(), self.table.lookup(&dst)) {
            (false, Some(p)) if p == ingress => Vec::new(),
            (false, Some(p)) => vec![p],
            _ => (0..self.queues.len()).filter(|&p| p != ingress).collect(),
        }
    }

    fn forward(&mut self, cx: &mut Context<'_>, frame: Vec<u8>, ingress: PortId) {
        self.stats.ports[ingress].rx += 1;
        if frame.len() < ETH_HEADER_LEN {
            self.stats.runt += 1;
            log::debug!("runt frame of {} bytes on port {ingress}", frame.len());
            return;
        }
        let out = self.egress(&frame, ingress);
        if out.is_empty() {
            self.stats.filtered += 1;
            return;
        }
        self.stats.switched += 1;
        let due = SimTime(cx.now().0 + self.cfg.forward_delay_ns);
        for port in out {
            self.stats.copies += 1;
            let q = &mut self.queues[port];
            if self.cfg.forward_delay_ns == 0 && q.is_empty() {
                self.stats.ports[port].tx += 1;
                cx.send(port, Message::Eth(EthMsg::Packet(frame.clone())));
            } else if q.len() >= self.cfg.queue_capacity {
                self.stats.ports[port].drop += 1;
            } else {
                q.push_back((due, frame.clone()));
                cx.timer_at(due, port as u64);
            }
        }
    }
}

impl Model for Switch {
    fn start(&mut self, _cx: &mut Context<'_>) -> Result<(), ModelError> {
        Ok(())
    }

    fn on_message(&mut self, cx: &mut Context<'_>, port: PortId, msg: Message) -> Result<(), ModelError> {
        match msg {
            Message::Eth(EthMsg::Packet(frame)) => self.forward(cx, frame, port),
            other => log::warn!("switch port {port}: ignoring {:?}", other.msg_type()),
        }
        Ok(())
    }

    fn on_timer(&mut self, cx: &mut Context<'_>, token: u64) -> Result<(), ModelError> {
        let port = token as usize;
        let (due, frame) = self.queues[port].pop_front().expect("egress timer without frame");
        debug_assert_eq!(due, cx.now());
        self.stats.ports[port].tx += 1;
        cx.send(port, Message::Eth(EthMsg::Packet(frame)));
        Ok(())
    }

    fn report(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .stats
            .ports
            .iter()
            .enumerate()
            .map(|(i, p)| format!("port{i}.rx={} port{i}.tx={} port{i}.drop={}", p.rx, p.tx, p.drop))
            .collect();
        let s = &self.stats;
        out.push(format!(
            "runt={} filtered={} switched={} copies={} queued={}",
            s.runt,
            s.filtered,
            s.switched,
            s.copies,
            self.queued()
        ));
        out
    }
}
