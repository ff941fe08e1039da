//! Synthetic host: guest memory, a driver for the reference NIC, and raw
//! Ethernet workloads.
//!
//! The "CPU" runs one operation at a time from a FIFO. MMIO operations block
//! it until their completion arrives; DMA requests from the device are served
//! immediately regardless. Interrupt handlers run after the interrupt entry
//! delay and only touch memory; any register writes they need go through
//! the CPU FIFO.
//!
//! Workload frames use ethertype 0x88b6 with a big-endian u16 sequence number.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::net::{build_frame, frame_dst, frame_ethertype, frame_src, MacAddr};
use crate::nic::{self, regs, Descriptor, DESC_LEN};
use crate::proto::{DeviceIntro, DeviceMsg, HostMsg, InterruptKind, Message, SimTime};
use crate::sync::{Context, Model, ModelError, PortId};

pub const WORKLOAD_ETHERTYPE: u16 = 0x88b6;

pub const TX_RING: u64 = 0x1000;
pub const RX_RING: u64 = 0x2000;
pub const TX_BUFS: u64 = 0x10000;
pub const MAX_RING: u64 = 256;
pub const MAX_BUF: u64 = 4096;
pub const RX_BUFS: u64 = TX_BUFS + MAX_RING * MAX_BUF;
const MIN_MEM: u64 = RX_BUFS + MAX_RING * MAX_BUF;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Workload {
    Idle,
    /// Send a frame, wait for it to come back, record the round trip.
    Pingpong {
        dst: MacAddr,
        count: u64,
        #[serde(default = "default_frame_len")]
        frame_len: usize,
    },
    /// Return every workload frame to its sender.
    Echo,
    /// Start a transmit every `gap_ns`, `count` times.
    Stream {
        dst: MacAddr,
        count: u64,
        gap_ns: u64,
        #[serde(default = "default_frame_len")]
        frame_len: usize,
    },
    /// Count delivered workload frames.
    Sink,
}

fn default_frame_len() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostConfig {
    pub mem_size: u64,
    pub mmio_issue_delay_ns: u64,
    pub interrupt_entry_delay_ns: u64,
    pub per_packet_processing_ns: u64,
    pub tx_ring_len: u64,
    pub rx_ring_len: u64,
    pub buf_size: u64,
    /// Virtual time a pingpong waits for its reply.
    pub workload_timeout_ns: u64,
    pub workload: Workload,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            mem_size: 16 << 20,
            mmio_issue_delay_ns: 0,
            interrupt_entry_delay_ns: 0,
            per_packet_processing_ns: 0,
            tx_ring_len: 64,
            rx_ring_len: 64,
            buf_size: 2048,
            workload_timeout_ns: 1_000_000,
            workload: Workload::Idle,
        }
    }
}

impl HostConfig {
    pub fn validate(&self) -> Result<(), HostError> {
        let ring_ok = |n: u64| (2..=MAX_RING).contains(&n);
        if !ring_ok(self.tx_ring_len) || !ring_ok(self.rx_ring_len) {
            return Err(HostError::Config("ring lengths must be in 2..=256"));
        }
        if !(64..=MAX_BUF).contains(&self.buf_size) {
            return Err(HostError::Config("buf_size must be in 64..=4096"));
        }
        if self.mem_size < MIN_MEM {
            return Err(HostError::Config("mem_size too small for rings and buffers"));
        }
        let frame_len = match &self.workload {
            Workload::Pingpong { frame_len, .. } | Workload::Stream { frame_len, .. } => *frame_len,
            _ => 64,
        };
        if frame_len < 16 || frame_len as u64 > self.buf_size {
            return Err(HostError::Config("frame_len must be in 16..=buf_size"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HostError {
    #[error("invalid host configuration: {0}")]
    Config(&'static str),
    #[error("MMIO completion for unknown request {0}")]
    CompletionIdMismatch(u64),
    #[error("DMA of {len} bytes at {addr:#x} is outside guest memory")]
    DmaOutOfRange { addr: u64, len: u64 },
    #[error("no reply to ping {seq} within {timeout_ns} ns")]
    WorkloadTimeout { seq: u16, timeout_ns: u64 },
    #[error("device enable bit did not stick")]
    DeviceNotEnabled,
}

#[derive(Debug, Clone, Copy)]
enum ReadAction {
    CheckEnabled,
    StoreMac,
}

#[derive(Debug, Clone)]
enum Op {
    MmioWrite { offset: u64, value: u64 },
    MmioRead { offset: u64, then: ReadAction },
    Transmit { frame: Vec<u8>, ping: bool },
    Delay(u64),
    WaitUntil(SimTime),
    StartWorkload,
}

#[derive(Debug)]
enum Cpu {
    Idle,
    Sleeping,
    /// Waiting out the MMIO issue delay.
    Issuing(Op),
    Mmio { req_id: u64, then: Option<ReadAction> },
    WaitTxSpace,
}

const T_CPU: u64 = 0;
const T_IRQ: u64 = 1;
const T_TIMEOUT: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HostCounters {
    pub transmitted: u64,
    pub reaped: u64,
    pub received: u64,
    pub echoed: u64,
    pub dropped_irqs: u64,
}

#[derive(Debug)]
pub struct Host {
    cfg: HostConfig,
    mem: Vec<u8>,
    device: Option<DeviceIntro>,
    mac: MacAddr,
    cpu: Cpu,
    ops: VecDeque<Op>,
    next_req: u64,
    irqs: VecDeque<u32>,
    tx_tail: u64,
    tx_reap: u64,
    rx_next: u64,
    rx_tail: u64,
    ping_seq: u16,
    ping_sent: Option<SimTime>,
    ping_gen: u64,
    rtts: Vec<u64>,
    counters: HostCounters,
}

impl Host {
    pub const PCI: PortId = 0;

    pub fn new(cfg: HostConfig) -> Result<Self, HostError> {
        cfg.validate()?;
        Ok(Host {
            mem: vec![0; cfg.mem_size as usize],
            cfg,
            device: None,
            mac: MacAddr::default(),
            cpu: Cpu::Idle,
            ops: VecDeque::new(),
            next_req: 1,
            irqs: VecDeque::new(),
            tx_tail: 0,
            tx_reap: 0,
            rx_next: 0,
            rx_tail: 0,
            ping_seq: 0,
            ping_sent: None,
            ping_gen: 0,
            rtts: Vec::new(),
            counters: HostCounters::default(),
        })
    }

    pub fn rtts(&self) -> &[u64] {
        &self.rtts
    }

    pub fn counters(&self) -> HostCounters {
        self.counters
    }

    pub fn device(&self) -> Option<&DeviceIntro> {
        self.device.as_ref()
    }

    /// MAC address read back from the device.
    pub fn mac(&self) -> MacAddr {
        self.mac
    }

    pub fn memory(&self) -> &[u8] {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut [u8] {
        &mut self.mem
    }

    fn range(&self, addr: u64, len: u64) -> Result<std::ops::Range<usize>, HostError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.mem.len() as u64 => Ok(addr as usize..end as usize),
            _ => Err(HostError::DmaOutOfRange { addr, len }),
        }
    }

    fn desc(&self, addr: u64) -> Descriptor {
        Descriptor::decode(&self.mem[addr as usize..(addr + DESC_LEN) as usize]).unwrap()
    }

    fn put_desc(&mut self, addr: u64, d: Descriptor) {
        self.mem[addr as usize..(addr + DESC_LEN) as usize].copy_from_slice(&d.encode());
    }

    fn serve_dma(&mut self, cx: &mut Context<'_>, msg: DeviceMsg) -> Result<(), HostError> {
        let reply = match msg {
            DeviceMsg::DmaRead { req_id, addr, len } => {
                let r = self.range(addr, len as u64)?;
                HostMsg::DmaCompl { req_id, data: Some(self.mem[r].to_vec()) }
            }
            DeviceMsg::DmaWrite { req_id, addr, data } => {
                let r = self.range(addr, data.len() as u64)?;
                self.mem[r].copy_from_slice(&data);
                HostMsg::DmaCompl { req_id, data: None }
            }
            _ => unreachable!(),
        };
        cx.send(Self::PCI, Message::Host(reply));
        Ok(())
    }

    fn init_driver(&mut self, cx: &mut Context<'_>, intro: DeviceIntro) {
        if self.device.is_some() {
            log::error!("host: device announced itself twice; ignoring");
            return;
        }
        if intro.pci_vendor_id != nic::VENDOR_ID || intro.pci_device_id != nic::DEVICE_ID {
            log::warn!("host: unknown device {:04x}:{:04x}", intro.pci_vendor_id, intro.pci_device_id);
        }
        self.device = Some(intro);
        cx.send(Self::PCI, Message::Host(HostMsg::IntStatus { legacy: false, msi: true, msix: false }));
        let buf = self.cfg.buf_size;
        for i in 0..self.cfg.rx_ring_len {
            let d = Descriptor { addr: RX_BUFS + i * MAX_BUF, len: buf as u16, flags: 0 };
            self.put_desc(RX_RING + i * DESC_LEN, d);
        }
        self.rx_tail = self.cfg.rx_ring_len - 1;
        let w = |offset, value| Op::MmioWrite { offset, value };
        self.ops.extend([
            w(regs::TX_BASE, TX_RING),
            w(regs::TX_LEN, self.cfg.tx_ring_len),
            w(regs::RX_BASE, RX_RING),
            w(regs::RX_LEN, self.cfg.rx_ring_len),
            w(regs::RX_TAIL, self.rx_tail),
            w(regs::CTRL, regs::CTRL_ENABLE),
            Op::MmioRead { offset: regs::CTRL, then: ReadAction::CheckEnabled },
            Op::MmioRead { offset: regs::MAC, then: ReadAction::StoreMac },
            Op::StartWorkload,
        ]);
    }

    fn run_cpu(&mut self, cx: &mut Context<'_>) -> Result<(), HostError> {
        while matches!(self.cpu, Cpu::Idle) {
            let Some(op) = self.ops.pop_front() else { return Ok(()) };
            match op {
                Op::Delay(0) => {}
                Op::Delay(d) => {
                    cx.timer_in(d, T_CPU);
                    self.cpu = Cpu::Sleeping;
                }
                Op::WaitUntil(t) if t <= cx.now() => {}
                Op::WaitUntil(t) => {
                    cx.timer_at(t, T_CPU);
                    self.cpu = Cpu::Sleeping;
                }
                Op::StartWorkload => self.start_workload(cx),
                Op::Transmit { frame, ping } => {
                    let len = self.cfg.tx_ring_len;
                    if (self.tx_tail + 1) % len == self.tx_reap {
                        self.ops.push_front(Op::Transmit { frame, ping });
                        self.cpu = Cpu::WaitTxSpace;
                        return Ok(());
                    }
                    if ping {
                        self.ping_sent = Some(cx.now());
                        self.ping_gen += 1;
                        cx.timer_in(self.cfg.workload_timeout_ns, T_TIMEOUT | self.ping_gen << 8);
                    }
                    let addr = TX_BUFS + self.tx_tail * MAX_BUF;
                    self.mem[addr as usize..addr as usize + frame.len()].copy_from_slice(&frame);
                    let d = Descriptor { addr, len: frame.len() as u16, flags: 0 };
                    self.put_desc(TX_RING + self.tx_tail * DESC_LEN, d);
                    self.tx_tail = (self.tx_tail + 1) % len;
                    self.counters.transmitted += 1;
                    self.issue(cx, Op::MmioWrite { offset: regs::TX_TAIL, value: self.tx_tail });
                }
                op @ (Op::MmioWrite { .. } | Op::MmioRead { .. }) => self.issue(cx, op),
            }
        }
        Ok(())
    }

    fn issue(&mut self, cx: &mut Context<'_>, op: Op) {
        if self.cfg.mmio_issue_delay_ns > 0 && !matches!(self.cpu, Cpu::Issuing(_)) {
            cx.timer_in(self.cfg.mmio_issue_delay_ns, T_CPU);
            self.cpu = Cpu::Issuing(op);
            return;
        }
        let req_id = self.next_req;
        self.next_req += 1;
        let (msg, then) = match op {
            Op::MmioWrite { offset, value } => {
                (HostMsg::MmioWrite { req_id, bar: 0, offset, data: value.to_le_bytes().to_vec() }, None)
            }
            Op::MmioRead { offset, then } => (HostMsg::MmioRead { req_id, bar: 0, offset, len: 8 }, Some(then)),
            _ => unreachable!(),
        };
        cx.send(Self::PCI, Message::Host(msg));
        self.cpu = Cpu::Mmio { req_id, then };
    }

    fn mmio_done(&mut self, cx: &mut Context<'_>, req_id: u64, data: Option<Vec<u8>>) -> Result<(), HostError> {
        let then = match self.cpu {
            Cpu::Mmio { req_id: want, then } if want == req_id => then,
            _ => return Err(HostError::CompletionIdMismatch(req_id)),
        };
        self.cpu = Cpu::Idle;
        if let Some(action) = then {
            let mut b = [0u8; 8];
            if let Some(d) = data {
                let n = d.len().min(8);
                b[..n].copy_from_slice(&d[..n]);
            }
            let v = u64::from_le_bytes(b);
            match action {
                ReadAction::CheckEnabled if v & regs::CTRL_ENABLE == 0 => return Err(HostError::DeviceNotEnabled),
                ReadAction::CheckEnabled => {}
                ReadAction::StoreMac => self.mac = MacAddr::from_u64(v),
            }
        }
        self.run_cpu(cx)
    }

    fn interrupt(&mut self, cx: &mut Context<'_>, vector: u32) -> Result<(), HostError> {
        match vector {
            nic::MSI_TX => {
                let len = self.cfg.tx_ring_len;
                while self.tx_reap != self.tx_tail {
                    let a = TX_RING + self.tx_reap * DESC_LEN;
                    let d = self.desc(a);
                    if !d.done() {
                        break;
                    }
                    self.put_desc(a, Descriptor { flags: 0, ..d });
                    self.tx_reap = (self.tx_reap + 1) % len;
                    self.counters.reaped += 1;
                }
                if matches!(self.cpu, Cpu::WaitTxSpace) {
                    self.cpu = Cpu::Idle;
                }
            }
            nic::MSI_RX => {
                let len = self.cfg.rx_ring_len;
                let mut posted = 0;
                loop {
                    let a = RX_RING + self.rx_next * DESC_LEN;
                    let d = self.desc(a);
                    if !d.done() || self.rx_next == self.rx_tail {
                        break;
                    }
                    let frame = self.mem[d.addr as usize..(d.addr + d.len as u64) as usize].to_vec();
                    self.put_desc(a, Descriptor { addr: d.addr, len: self.cfg.buf_size as u16, flags: 0 });
                    self.rx_next = (self.rx_next + 1) % len;
                    posted += 1;
                    if d.flags & nic::DESC_ERR == 0 {
                        self.deliver(cx, frame)?;
                    }
                }
                if posted > 0 {
                    self.rx_tail = (self.rx_tail + posted) % len;
                    self.ops.push_back(Op::MmioWrite { offset: regs::RX_TAIL, value: self.rx_tail });
                }
            }
            v => log::warn!("host: interrupt on unused vector {v}"),
        }
        self.run_cpu(cx)
    }

    fn start_workload(&mut self, cx: &mut Context<'_>) {
        match self.cfg.workload.clone() {
            Workload::Pingpong { .. } => self.queue_ping(),
            Workload::Stream { dst, count, gap_ns, frame_len } => {
                let start = cx.now().0;
                for k in 0..count {
                    let frame = self.workload_frame(dst, k as u16, frame_len);
                    self.ops.push_back(Op::WaitUntil(SimTime(start + k * gap_ns)));
                    self.ops.push_back(Op::Transmit { frame, ping: false });
                }
            }
            Workload::Idle | Workload::Echo | Workload::Sink => {}
        }
    }

    fn workload_frame(&self, dst: MacAddr, seq: u16, len: usize) -> Vec<u8> {
        build_frame(dst, self.mac, WORKLOAD_ETHERTYPE, &seq.to_be_bytes(), len)
    }

    fn queue_ping(&mut self) {
        if let Workload::Pingpong { dst, frame_len, .. } = self.cfg.workload {
            let frame = self.workload_frame(dst, self.ping_seq, frame_len);
            self.ops.push_back(Op::Transmit { frame, ping: true });
        }
    }

    fn deliver(&mut self, cx: &mut Context<'_>, frame: Vec<u8>) -> Result<(), HostError> {
        if frame_ethertype(&frame) != Some(WORKLOAD_ETHERTYPE) || frame.len() < 16 {
            return Ok(());
        }
        if frame_dst(&frame) != Some(self.mac) {
            return Ok(());
        }
        self.counters.received += 1;
        let seq = u16::from_be_bytes([frame[14], frame[15]]);
        let dpp = self.cfg.per_packet_processing_ns;
        match self.cfg.workload {
            Workload::Pingpong { count, .. } => {
                let Some(sent) = self.ping_sent else { return Ok(()) };
                if seq != self.ping_seq {
                    return Ok(());
                }
                let rtt = cx.now().0 - sent.0;
                self.rtts.push(rtt);
                cx.note("RTT", rtt.to_le_bytes().to_vec());
                self.ping_sent = None;
                self.ping_gen += 1;
                self.ping_seq = self.ping_seq.wrapping_add(1);
                if (self.rtts.len() as u64) < count {
                    self.ops.push_back(Op::Delay(dpp));
                    self.queue_ping();
                }
            }
            Workload::Echo => {
                let mut reply = frame;
                let src = frame_src(&reply).unwrap();
                reply[0..6].copy_from_slice(&src.0);
                reply[6..12].copy_from_slice(&self.mac.0);
                self.counters.echoed += 1;
                self.ops.push_back(Op::Delay(dpp));
                self.ops.push_back(Op::Transmit { frame: reply, ping: false });
            }
            _ => {}
        }
        Ok(())
    }
}

impl Model for Host {
    fn start(&mut self, _cx: &mut Context<'_>) -> Result<(), ModelError> {
        Ok(())
    }

    fn on_message(&mut self, cx: &mut Context<'_>, _port: PortId, msg: Message) -> Result<(), ModelError> {
        let Message::Device(msg) = msg else {
            log::warn!("host: unexpected {:?}", msg.msg_type());
            return Ok(());
        };
        match msg {
            DeviceMsg::InitDev(intro) => {
                self.init_driver(cx, intro);
                self.run_cpu(cx)?;
            }
            m @ (DeviceMsg::DmaRead { .. } | DeviceMsg::DmaWrite { .. }) => self.serve_dma(cx, m)?,
            DeviceMsg::MmioCompl { req_id, data } => self.mmio_done(cx, req_id, data)?,
            DeviceMsg::Interrupt { kind: InterruptKind::Msi, vector } => {
                if self.cfg.interrupt_entry_delay_ns == 0 {
                    self.interrupt(cx, vector)?;
                } else {
                    self.irqs.push_back(vector);
                    cx.timer_in(self.cfg.interrupt_entry_delay_ns, T_IRQ);
                }
            }
            DeviceMsg::Interrupt { kind, vector } => {
                self.counters.dropped_irqs += 1;
                log::warn!("host: dropping {kind:?} interrupt {vector}: only MSI is enabled");
            }
        }
        Ok(())
    }

    fn on_timer(&mut self, cx: &mut Context<'_>, token: u64) -> Result<(), ModelError> {
        match token & 0xff {
            T_CPU => match std::mem::replace(&mut self.cpu, Cpu::Idle) {
                Cpu::Sleeping => self.run_cpu(cx)?,
                Cpu::Issuing(op) => {
                    self.cpu = Cpu::Issuing(op.clone());
                    self.issue(cx, op);
                    self.run_cpu(cx)?;
                }
                other => unreachable!("cpu timer in state {other:?}"),
            },
            T_IRQ => {
                let v = self.irqs.pop_front().expect("queued interrupt");
                self.interrupt(cx, v)?;
            }
            T_TIMEOUT => {
                if token >> 8 == self.ping_gen && self.ping_sent.is_some() {
                    return Err(HostError::WorkloadTimeout {
                        seq: self.ping_seq,
                        timeout_ns: self.cfg.workload_timeout_ns,
                    }
                    .into());
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    fn report(&self) -> Vec<String> {
        let c = self.counters;
        let mut out: Vec<String> = self.rtts.iter().map(|r| format!("rtt_ns={r}")).collect();
        match self.cfg.workload {
            Workload::Echo => out.push(format!("echoed={}", c.echoed)),
            Workload::Stream { .. } => out.push(format!("sent={}", c.transmitted)),
            Workload::Sink => out.push(format!("delivered={}", c.received)),
            _ => {}
        }
        out.push(format!("transmitted={} reaped={} received={}", c.transmitted, c.reaped, c.received));
        out
    }
}
