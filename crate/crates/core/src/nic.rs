//! Behavioral model of the reference NIC (register map in `docs/refnic.md`).
//!
//! One PCIe port towards the host and one Ethernet port. Transmit handles
//! one descriptor at a time in ring order: fetch descriptor, fetch payload,
//! wait the tx pipeline delay, emit the frame, write the descriptor back and
//! raise MSI vector 0. Receive reserves a posted buffer on arrival (or drops),
//! waits the rx pipeline delay, fetches the descriptor, then writes payload
//! and descriptor and raises MSI vector 1.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::net::{frame_dst, MacAddr};
use crate::proto::{Bar, BarKind, BarOffset, DeviceIntro, DeviceMsg, EthMsg, HostMsg, InterruptKind, Message};
use crate::sync::{Context, Model, ModelError, PortId};

/// BAR0 register offsets. All registers are 64-bit little-endian.
pub mod regs {
    pub const CTRL: u64 = 0x00;
    pub const TX_BASE: u64 = 0x08;
    pub const TX_LEN: u64 = 0x10;
    pub const TX_TAIL: u64 = 0x18;
    pub const RX_BASE: u64 = 0x20;
    pub const RX_LEN: u64 = 0x28;
    pub const RX_TAIL: u64 = 0x30;
    pub const IRQ_STATUS: u64 = 0x38;
    pub const DROPS: u64 = 0x40;
    pub const MAC: u64 = 0x48;

    pub const CTRL_ENABLE: u64 = 1;
    pub const IRQ_TX: u64 = 1;
    pub const IRQ_RX: u64 = 2;
}

pub const VENDOR_ID: u16 = 0x5342;
pub const DEVICE_ID: u16 = 0x0001;
pub const BAR0_SIZE: u64 = 4096;
pub const MSI_TX: u32 = 0;
pub const MSI_RX: u32 = 1;

pub const DESC_LEN: u64 = 16;
pub const DESC_DONE: u16 = 1;
/// Set with `DESC_DONE` when a received frame was dropped for not fitting.
pub const DESC_ERR: u16 = 2;

/// Ring descriptor as laid out in guest memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Descriptor {
    pub addr: u64,
    pub len: u16,
    pub flags: u16,
}

impl Descriptor {
    pub fn encode(&self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..8].copy_from_slice(&self.addr.to_le_bytes());
        b[8..10].copy_from_slice(&self.len.to_le_bytes());
        b[10..12].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Descriptor> {
        if b.len() != 16 {
            return None;
        }
        Some(Descriptor {
            addr: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            len: u16::from_le_bytes(b[8..10].try_into().unwrap()),
            flags: u16::from_le_bytes(b[10..12].try_into().unwrap()),
        })
    }

    pub fn done(&self) -> bool {
        self.flags & DESC_DONE != 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NicConfig {
    pub mac: MacAddr,
    #[serde(default = "default_pipeline")]
    pub tx_pipeline_ns: u64,
    #[serde(default = "default_pipeline")]
    pub rx_pipeline_ns: u64,
    /// Delay between an MMIO request arriving and it taking effect.
    #[serde(default)]
    pub mmio_delay_ns: u64,
}

fn default_pipeline() -> u64 {
    200
}

impl NicConfig {
    pub fn new(mac: MacAddr) -> Self {
        NicConfig { mac, tx_pipeline_ns: 200, rx_pipeline_ns: 200, mmio_delay_ns: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NicError {
    #[error("DMA completion for unknown request {0}")]
    UnknownDmaCompletion(u64),
    #[error("DMA completion for request {0} has the wrong shape")]
    BadDmaCompletion(u64),
    #[error("descriptor at {addr:#x} is malformed")]
    BadDescriptor { addr: u64 },
}

#[derive(Debug)]
enum Dma {
    TxDesc { idx: u64 },
    TxData { idx: u64, desc: Descriptor },
    RxDesc { frame: Vec<u8>, idx: u64 },
    Write,
}

#[derive(Debug, Clone, Copy)]
enum Timer {
    Mmio,
    TxEmit,
    RxStart,
}

impl Timer {
    const ALL: [Timer; 3] = [Timer::Mmio, Timer::TxEmit, Timer::RxStart];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NicCounters {
    pub tx_packets: u64,
    pub rx_packets: u64,
    pub drops: u64,
    pub filtered: u64,
    pub unmapped: u64,
}

#[derive(Debug)]
pub struct Nic {
    cfg: NicConfig,
    ctrl: u64,
    tx_base: u64,
    tx_len: u64,
    tx_tail: u64,
    tx_head: u64,
    tx_busy: bool,
    rx_base: u64,
    rx_len: u64,
    rx_tail: u64,
    /// Next buffer to hand out on arrival.
    rx_reserve: u64,
    irq_status: u64,
    msi_enabled: bool,
    next_req: u64,
    dma: HashMap<u64, Dma>,
    mmio_queue: VecDeque<HostMsg>,
    tx_ready: VecDeque<(u64, Descriptor, Vec<u8>)>,
    rx_waiting: VecDeque<(Vec<u8>, u64)>,
    counters: NicCounters,
}

impl Nic {
    pub const PCI: PortId = 0;
    pub const ETH: PortId = 1;

    pub fn new(cfg: NicConfig) -> Self {
        Nic {
            cfg,
            ctrl: 0,
            tx_base: 0,
            tx_len: 0,
            tx_tail: 0,
            tx_head: 0,
            tx_busy: false,
            rx_base: 0,
            rx_len: 0,
            rx_tail: 0,
            rx_reserve: 0,
            irq_status: 0,
            msi_enabled: false,
            next_req: 1,
            dma: HashMap::new(),
            mmio_queue: VecDeque::new(),
            tx_ready: VecDeque::new(),
            rx_waiting: VecDeque::new(),
            counters: NicCounters::default(),
        }
    }

    pub fn intro() -> DeviceIntro {
        DeviceIntro {
            pci_vendor_id: VENDOR_ID,
            pci_device_id: DEVICE_ID,
            pci_class: 0x02,
            pci_subclass: 0x00,
            pci_revision: 1,
            bars: vec![Bar { size: BAR0_SIZE, kind: BarKind::Mmio }],
            num_msi_vectors: 2,
            num_msix_vectors: 0,
            msix_table: BarOffset::default(),
            msix_pba: BarOffset::default(),
        }
    }

    pub fn counters(&self) -> NicCounters {
        self.counters
    }

    fn enabled(&self) -> bool {
        self.ctrl & regs::CTRL_ENABLE != 0
    }

    fn dma_read(&mut self, cx: &mut Context<'_>, addr: u64, len: u32, ctx: Dma) {
        let req_id = self.next_req;
        self.next_req += 1;
        self.dma.insert(req_id, ctx);
        cx.send(Self::PCI, Message::Device(DeviceMsg::DmaRead { req_id, addr, len }));
    }

    fn dma_write(&mut self, cx: &mut Context<'_>, addr: u64, data: Vec<u8>) {
        let req_id = self.next_req;
        self.next_req += 1;
        self.dma.insert(req_id, Dma::Write);
        cx.send(Self::PCI, Message::Device(DeviceMsg::DmaWrite { req_id, addr, data }));
    }

    fn interrupt(&mut self, cx: &mut Context<'_>, vector: u32) {
        self.irq_status |= 1 << vector;
        if self.msi_enabled {
            cx.send(Self::PCI, Message::Device(DeviceMsg::Interrupt { kind: InterruptKind::Msi, vector }));
        }
    }

    fn read_reg(&mut self, offset: u64) -> Option<u64> {
        Some(match offset {
            regs::CTRL => self.ctrl,
            regs::TX_BASE => self.tx_base,
            regs::TX_LEN => self.tx_len,
            regs::TX_TAIL => self.tx_tail,
            regs::RX_BASE => self.rx_base,
            regs::RX_LEN => self.rx_len,
            regs::RX_TAIL => self.rx_tail,
            regs::IRQ_STATUS => std::mem::take(&mut self.irq_status),
            regs::DROPS => self.counters.drops,
            regs::MAC => self.cfg.mac.to_u64(),
            _ => return None,
        })
    }

    fn write_reg(&mut self, cx: &mut Context<'_>, offset: u64, v: u64) {
        match offset {
            regs::CTRL => self.ctrl = v,
            regs::TX_BASE => self.tx_base = v,
            regs::TX_LEN => self.tx_len = v,
            regs::TX_TAIL => {
                self.tx_tail = v;
                self.kick_tx(cx);
            }
            regs::RX_BASE => self.rx_base = v,
            regs::RX_LEN => self.rx_len = v,
            regs::RX_TAIL => self.rx_tail = v,
            regs::IRQ_STATUS => self.irq_status &= !v,
            _ => unreachable!("checked by caller"),
        }
    }

    fn handle_mmio(&mut self, cx: &mut Context<'_>, msg: HostMsg) {
        match msg {
            HostMsg::MmioRead { req_id, bar, offset, len } => {
                let fits = (1..=8).contains(&len) && (offset & 7) + len as u64 <= 8;
                let reg = if bar == 0 && fits { self.read_reg(offset & !7) } else { None };
                let data = match reg {
                    Some(v) => {
                        let shift = (offset & 7) * 8;
                        (v >> shift).to_le_bytes()[..len as usize].to_vec()
                    }
                    None => {
                        self.counters.unmapped += 1;
                        log::warn!("nic: read of unmapped register bar {bar} offset {offset:#x}");
                        vec![0xff; (len as usize).min(8)]
                    }
                };
                cx.send(Self::PCI, Message::Device(DeviceMsg::MmioCompl { req_id, data: Some(data) }));
            }
            HostMsg::MmioWrite { req_id, bar, offset, data } => {
                let mapped = bar == 0 && offset & 7 == 0 && offset <= regs::MAC && (1..=8).contains(&data.len());
                if !mapped || matches!(offset, regs::DROPS | regs::MAC) {
                    self.counters.unmapped += 1;
                    log::warn!("nic: write to unmapped register bar {bar} offset {offset:#x}");
                    let ones = vec![0xff; data.len().min(8)];
                    cx.send(Self::PCI, Message::Device(DeviceMsg::MmioCompl { req_id, data: Some(ones) }));
                    return;
                }
                let mut b = [0u8; 8];
                b[..data.len()].copy_from_slice(&data);
                cx.send(Self::PCI, Message::Device(DeviceMsg::MmioCompl { req_id, data: None }));
                self.write_reg(cx, offset, u64::from_le_bytes(b));
            }
            _ => unreachable!(),
        }
    }

    fn kick_tx(&mut self, cx: &mut Context<'_>) {
        if self.tx_busy || !self.enabled() || self.tx_len == 0 || self.tx_head == self.tx_tail % self.tx_len {
            return;
        }
        self.tx_busy = true;
        let idx = self.tx_head;
        self.dma_read(cx, self.tx_base + idx * DESC_LEN, DESC_LEN as u32, Dma::TxDesc { idx });
    }

    fn emit_tx(&mut self, cx: &mut Context<'_>) {
        let (idx, desc, frame) = self.tx_ready.pop_front().expect("tx frame");
        self.counters.tx_packets += 1;
        cx.send(Self::ETH, Message::Eth(EthMsg::Packet(frame)));
        let wb = Descriptor { flags: desc.flags | DESC_DONE, ..desc };
        self.dma_write(cx, self.tx_base + idx * DESC_LEN, wb.encode().to_vec());
        self.interrupt(cx, MSI_TX);
        self.tx_head = (idx + 1) % self.tx_len;
        self.tx_busy = false;
        self.kick_tx(cx);
    }

    fn rx_arrival(&mut self, cx: &mut Context<'_>, frame: Vec<u8>) {
        let accept = frame_dst(&frame).is_some_and(|d| d == self.cfg.mac || d.is_group());
        if !accept {
            self.counters.filtered += 1;
            return;
        }
        if !self.enabled() || self.rx_len == 0 || self.rx_reserve == self.rx_tail % self.rx_len {
            self.counters.drops += 1;
            return;
        }
        let idx = self.rx_reserve;
        self.rx_reserve = (idx + 1) % self.rx_len;
        if self.cfg.rx_pipeline_ns == 0 {
            self.rx_start(cx, frame, idx);
        } else {
            self.rx_waiting.push_back((frame, idx));
            cx.timer_in(self.cfg.rx_pipeline_ns, Timer::RxStart as u64);
        }
    }

    fn rx_start(&mut self, cx: &mut Context<'_>, frame: Vec<u8>, idx: u64) {
        self.dma_read(cx, self.rx_base + idx * DESC_LEN, DESC_LEN as u32, Dma::RxDesc { frame, idx });
    }

    fn dma_done(&mut self, cx: &mut Context<'_>, req_id: u64, data: Option<Vec<u8>>) -> Result<(), NicError> {
        let ctx = self.dma.remove(&req_id).ok_or(NicError::UnknownDmaCompletion(req_id))?;
        match ctx {
            Dma::Write => {
                if data.is_some() {
                    return Err(NicError::BadDmaCompletion(req_id));
                }
            }
            Dma::TxDesc { idx } => {
                let addr = self.tx_base + idx * DESC_LEN;
                let data = data.ok_or(NicError::BadDmaCompletion(req_id))?;
                let desc = Descriptor::decode(&data).ok_or(NicError::BadDescriptor { addr })?;
                self.dma_read(cx, desc.addr, desc.len as u32, Dma::TxData { idx, desc });
            }
            Dma::TxData { idx, desc } => {
                let frame = data.ok_or(NicError::BadDmaCompletion(req_id))?;
                self.tx_ready.push_back((idx, desc, frame));
                if self.cfg.tx_pipeline_ns == 0 {
                    self.emit_tx(cx);
                } else {
                    cx.timer_in(self.cfg.tx_pipeline_ns, Timer::TxEmit as u64);
                }
            }
            Dma::RxDesc { frame, idx } => {
                let addr = self.rx_base + idx * DESC_LEN;
                let data = data.ok_or(NicError::BadDmaCompletion(req_id))?;
                let desc = Descriptor::decode(&data).ok_or(NicError::BadDescriptor { addr })?;
                if frame.len() > desc.len as usize {
                    self.counters.drops += 1;
                    log::warn!("nic: {}-byte frame does not fit {}-byte buffer", frame.len(), desc.len);
                    let wb = Descriptor { addr: desc.addr, len: 0, flags: DESC_DONE | DESC_ERR };
                    self.dma_write(cx, addr, wb.encode().to_vec());
                    self.interrupt(cx, MSI_RX);
                    return Ok(());
                }
                self.counters.rx_packets += 1;
                let wb = Descriptor { addr: desc.addr, len: frame.len() as u16, flags: DESC_DONE };
                self.dma_write(cx, desc.addr, frame);
                self.dma_write(cx, addr, wb.encode().to_vec());
                self.interrupt(cx, MSI_RX);
            }
        }
        Ok(())
    }
}

impl Model for Nic {
    fn start(&mut self, cx: &mut Context<'_>) -> Result<(), ModelError> {
        cx.send(Self::PCI, Message::Device(DeviceMsg::InitDev(Self::intro())));
        Ok(())
    }

    fn on_message(&mut self, cx: &mut Context<'_>, port: PortId, msg: Message) -> Result<(), ModelError> {
        match (port, msg) {
            (Self::PCI, Message::Host(HostMsg::DmaCompl { req_id, data })) => self.dma_done(cx, req_id, data)?,
            (Self::PCI, Message::Host(HostMsg::IntStatus { msi, .. })) => self.msi_enabled = msi,
            (Self::PCI, Message::Host(m)) => {
                if self.cfg.mmio_delay_ns == 0 {
                    self.handle_mmio(cx, m);
                } else {
                    self.mmio_queue.push_back(m);
                    cx.timer_in(self.cfg.mmio_delay_ns, Timer::Mmio as u64);
                }
            }
            (Self::ETH, Message::Eth(EthMsg::Packet(frame))) => self.rx_arrival(cx, frame),
            (port, m) => log::warn!("nic: unexpected {:?} on port {port}", m.msg_type()),
        }
        Ok(())
    }

    fn on_timer(&mut self, cx: &mut Context<'_>, token: u64) -> Result<(), ModelError> {
        match Timer::ALL[token as usize] {
            Timer::Mmio => {
                let m = self.mmio_queue.pop_front().expect("queued mmio");
                self.handle_mmio(cx, m);
            }
            Timer::TxEmit => self.emit_tx(cx),
            Timer::RxStart => {
                let (frame, idx) = self.rx_waiting.pop_front().expect("rx frame");
                self.rx_start(cx, frame, idx);
            }
        }
        Ok(())
    }

    fn report(&self) -> Vec<String> {
        let c = self.counters;
        vec![format!(
            "tx_packets={} rx_packets={} drops={} filtered={} unmapped={}",
            c.tx_packets, c.rx_packets, c.drops, c.filtered, c.unmapped
        )]
    }
}
