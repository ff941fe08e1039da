//! Message catalog for the PCIe and Ethernet component interfaces, plus the
//! fixed-size slot encoding every process agrees on.
//!
//! Slot layout (all integers little-endian):
//!
//! ```text
//! [0..8)    timestamp (ns of virtual time)
//! [8..12)   payload length
//! [12..)    payload
//! [last]    bit 7 = owner (set = consumer), bits 0..7 = message type
//! ```

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// Bytes before the payload in every slot.
pub const HEADER_LEN: usize = 12;
/// Owner bit in the trailing metadata byte.
pub const OWNER_BIT: u8 = 0x80;
/// Mask selecting the message type from the trailing metadata byte.
pub const TYPE_MASK: u8 = 0x7f;
/// Smallest Ethernet frame (dst, src, ethertype).
pub const MIN_FRAME_LEN: usize = 14;

/// Virtual time in nanoseconds since the simulation epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    /// Used as "never" for unsynchronized horizons and end-of-stream markers.
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn ns(self) -> u64 {
        self.0
    }

    pub fn saturating_add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-channel timing and queue geometry, agreed by both ends at handshake.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    /// Virtual-time delay every message on this channel incurs.
    pub link_latency_ns: u64,
    /// Longest gap the sender allows before emitting a SYNC.
    pub sync_interval_ns: u64,
    pub slot_size_bytes: u32,
    pub queue_len_slots: u32,
    pub synchronized: bool,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            link_latency_ns: 500,
            sync_interval_ns: 500,
            slot_size_bytes: 4096,
            queue_len_slots: 256,
            synchronized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParamsError {
    #[error("link latency must be positive")]
    ZeroLatency,
    #[error("sync interval {interval} must be in (0, {latency}]")]
    BadSyncInterval { interval: u64, latency: u64 },
    #[error("slot size {0} must be a multiple of 64 and at least 128")]
    BadSlotSize(u32),
    #[error("queue length {0} must be at least 2")]
    BadQueueLen(u32),
}

impl ChannelParams {
    pub fn latency(&self) -> SimTime {
        SimTime(self.link_latency_ns)
    }

    pub fn sync_interval(&self) -> SimTime {
        SimTime(self.sync_interval_ns)
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        if self.link_latency_ns == 0 {
            return Err(ParamsError::ZeroLatency);
        }
        if self.sync_interval_ns == 0 || self.sync_interval_ns > self.link_latency_ns {
            return Err(ParamsError::BadSyncInterval {
                interval: self.sync_interval_ns,
                latency: self.link_latency_ns,
            });
        }
        if !self.slot_size_bytes.is_multiple_of(64) || self.slot_size_bytes < 128 {
            return Err(ParamsError::BadSlotSize(self.slot_size_bytes));
        }
        if self.queue_len_slots < 2 {
            return Err(ParamsError::BadQueueLen(self.queue_len_slots));
        }
        Ok(())
    }

    /// Largest payload a single slot can carry.
    pub fn max_payload(&self) -> usize {
        max_payload(self.slot_size_bytes as usize)
    }
}

pub const fn max_payload(slot_size: usize) -> usize {
    slot_size.saturating_sub(HEADER_LEN + 1)
}

/// Closed catalog of 7-bit message type codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Sync = 0x01,
    InitDev = 0x10,
    DmaRead = 0x11,
    DmaWrite = 0x12,
    MmioCompl = 0x13,
    Interrupt = 0x14,
    DmaCompl = 0x20,
    MmioRead = 0x21,
    MmioWrite = 0x22,
    IntStatus = 0x23,
    Packet = 0x30,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::Sync,
        MsgType::InitDev,
        MsgType::DmaRead,
        MsgType::DmaWrite,
        MsgType::MmioCompl,
        MsgType::Interrupt,
        MsgType::DmaCompl,
        MsgType::MmioRead,
        MsgType::MmioWrite,
        MsgType::IntStatus,
        MsgType::Packet,
    ];

    pub fn from_code(code: u8) -> Option<MsgType> {
        MsgType::ALL.iter().copied().find(|t| *t as u8 == code)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Name used in trace files.
    pub fn name(self) -> &'static str {
        match self {
            MsgType::Sync => "SYNC",
            MsgType::InitDev => "INIT_DEV",
            MsgType::DmaRead => "DMA_READ",
            MsgType::DmaWrite => "DMA_WRITE",
            MsgType::MmioCompl => "MMIO_COMPL",
            MsgType::Interrupt => "INTERRUPT",
            MsgType::DmaCompl => "DMA_COMPL",
            MsgType::MmioRead => "MMIO_READ",
            MsgType::MmioWrite => "MMIO_WRITE",
            MsgType::IntStatus => "INT_STATUS",
            MsgType::Packet => "PACKET",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarKind {
    Mmio = 0,
    Dummy = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bar {
    pub size: u64,
    pub kind: BarKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BarOffset {
    pub bar: u8,
    pub offset: u64,
}

/// Payload of INIT_DEV: how a device introduces itself to the host.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceIntro {
    pub pci_vendor_id: u16,
    pub pci_device_id: u16,
    pub pci_class: u8,
    pub pci_subclass: u8,
    pub pci_revision: u8,
    pub bars: Vec<Bar>,
    pub num_msi_vectors: u16,
    pub num_msix_vectors: u16,
    pub msix_table: BarOffset,
    pub msix_pba: BarOffset,
}

pub const MAX_BARS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterruptKind {
    Legacy = 0,
    Msi = 1,
    Msix = 2,
}

/// Device to host.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeviceMsg {
    InitDev(DeviceIntro),
    DmaRead { req_id: u64, addr: u64, len: u32 },
    DmaWrite { req_id: u64, addr: u64, data: Vec<u8> },
    MmioCompl { req_id: u64, data: Option<Vec<u8>> },
    Interrupt { kind: InterruptKind, vector: u32 },
}

/// Host to device.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HostMsg {
    DmaCompl { req_id: u64, data: Option<Vec<u8>> },
    MmioRead { req_id: u64, bar: u8, offset: u64, len: u32 },
    MmioWrite { req_id: u64, bar: u8, offset: u64, data: Vec<u8> },
    IntStatus { legacy: bool, msi: bool, msix: bool },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EthMsg {
    /// Frame without CRC.
    Packet(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Sync,
    Device(DeviceMsg),
    Host(HostMsg),
    Eth(EthMsg),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Sync => MsgType::Sync,
            Message::Device(m) => match m {
                DeviceMsg::InitDev(_) => MsgType::InitDev,
                DeviceMsg::DmaRead { .. } => MsgType::DmaRead,
                DeviceMsg::DmaWrite { .. } => MsgType::DmaWrite,
                DeviceMsg::MmioCompl { .. } => MsgType::MmioCompl,
                DeviceMsg::Interrupt { .. } => MsgType::Interrupt,
            },
            Message::Host(m) => match m {
                HostMsg::DmaCompl { .. } => MsgType::DmaCompl,
                HostMsg::MmioRead { .. } => MsgType::MmioRead,
                HostMsg::MmioWrite { .. } => MsgType::MmioWrite,
                HostMsg::IntStatus { .. } => MsgType::IntStatus,
            },
            Message::Eth(EthMsg::Packet(_)) => MsgType::Packet,
        }
    }

    pub fn is_sync(&self) -> bool {
        matches!(self, Message::Sync)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub timestamp: SimTime,
    pub body: Message,
}

impl WireMessage {
    pub fn new(timestamp: SimTime, body: Message) -> Self {
        WireMessage { timestamp, body }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("message needs {needed} bytes but the slot holds {capacity}")]
    OversizedMessage { needed: usize, capacity: usize },
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("declared payload length {declared} exceeds slot capacity {capacity}")]
    TruncatedPayload { declared: usize, capacity: usize },
    #[error("malformed {ty} payload: {reason}")]
    Malformed { ty: &'static str, reason: &'static str },
    #[error("block of {0} bytes cannot hold a slot header")]
    BlockTooSmall(usize),
}

fn malformed(ty: MsgType, reason: &'static str) -> CodecError {
    CodecError::Malformed { ty: ty.name(), reason }
}

fn valid_mmio_len(len: usize) -> bool {
    matches!(len, 1 | 2 | 4 | 8)
}

/// Type-specific payload bytes of `msg` (what trace digests cover).
pub fn encode_payload(msg: &Message, out: &mut Vec<u8>) -> Result<(), CodecError> {
    match msg {
        Message::Sync => {}
        Message::Device(m) => match m {
            DeviceMsg::InitDev(intro) => {
                if intro.bars.len() > MAX_BARS {
                    return Err(malformed(MsgType::InitDev, "more than 6 BARs"));
                }
                if intro.bars.iter().any(|b| b.size != 0 && !b.size.is_power_of_two()) {
                    return Err(malformed(MsgType::InitDev, "BAR size not a power of two"));
                }
                out.extend_from_slice(&intro.pci_vendor_id.to_le_bytes());
                out.extend_from_slice(&intro.pci_device_id.to_le_bytes());
                out.push(intro.pci_class);
                out.push(intro.pci_subclass);
                out.push(intro.pci_revision);
                out.push(intro.bars.len() as u8);
                for bar in &intro.bars {
                    out.extend_from_slice(&bar.size.to_le_bytes());
                    out.push(bar.kind as u8);
                }
                out.extend_from_slice(&intro.num_msi_vectors.to_le_bytes());
                out.extend_from_slice(&intro.num_msix_vectors.to_le_bytes());
                for off in [intro.msix_table, intro.msix_pba] {
                    out.push(off.bar);
                    out.extend_from_slice(&off.offset.to_le_bytes());
                }
            }
            DeviceMsg::DmaRead { req_id, addr, len } => {
                out.extend_from_slice(&req_id.to_le_bytes());
                out.extend_from_slice(&addr.to_le_bytes());
                out.extend_from_slice(&len.to_le_bytes());
            }
            DeviceMsg::DmaWrite { req_id, addr, data } => {
                out.extend_from_slice(&req_id.to_le_bytes());
                out.extend_from_slice(&addr.to_le_bytes());
                out.extend_from_slice(&(data.len() as u32).to_le_bytes());
                out.extend_from_slice(data);
            }
            DeviceMsg::MmioCompl { req_id, data } => {
                out.extend_from_slice(&req_id.to_le_bytes());
                put_opt_data(out, data.as_deref());
            }
            DeviceMsg::Interrupt { kind, vector } => {
                out.push(*kind as u8);
                out.extend_from_slice(&vector.to_le_bytes());
            }
        },
        Message::Host(m) => match m {
            HostMsg::DmaCompl { req_id, data } => {
                out.extend_from_slice(&req_id.to_le_bytes());
                put_opt_data(out, data.as_deref());
            }
            HostMsg::MmioRead { req_id, bar, offset, len } => {
                if !valid_mmio_len(*len as usize) {
                    return Err(malformed(MsgType::MmioRead, "length not 1, 2, 4 or 8"));
                }
                out.extend_from_slice(&req_id.to_le_bytes());
                out.push(*bar);
                out.extend_from_slice(&offset.to_le_bytes());
                out.extend_from_slice(&len.to_le_bytes());
            }
            HostMsg::MmioWrite { req_id, bar, offset, data } => {
                if !valid_mmio_len(data.len()) {
                    return Err(malformed(MsgType::MmioWrite, "length not 1, 2, 4 or 8"));
                }
                out.extend_from_slice(&req_id.to_le_bytes());
                out.push(*bar);
                out.extend_from_slice(&offset.to_le_bytes());
                out.extend_from_slice(&(data.len() as u32).to_le_bytes());
                out.extend_from_slice(data);
            }
            HostMsg::IntStatus { legacy, msi, msix } => {
                out.push((*legacy as u8) | (*msi as u8) << 1 | (*msix as u8) << 2);
            }
        },
        Message::Eth(EthMsg::Packet(data)) => {
            if data.len() < MIN_FRAME_LEN || data.len() > u16::MAX as usize {
                return Err(malformed(MsgType::Packet, "frame length out of range"));
            }
            out.extend_from_slice(&(data.len() as u16).to_le_bytes());
            out.extend_from_slice(data);
        }
    }
    Ok(())
}

fn put_opt_data(out: &mut Vec<u8>, data: Option<&[u8]>) {
    match data {
        Some(d) => {
            out.push(1);
            out.extend_from_slice(d);
        }
        None => out.push(0),
    }
}

/// Writes header and payload into `body` (the slot minus its metadata byte)
/// and returns the type code to publish in the metadata byte.
pub fn encode_body(msg: &WireMessage, body: &mut [u8]) -> Result<MsgType, CodecError> {
    let mut payload = Vec::new();
    encode_payload(&msg.body, &mut payload)?;
    let needed = HEADER_LEN + payload.len();
    if needed > body.len() {
        return Err(CodecError::OversizedMessage { needed: needed + 1, capacity: body.len() + 1 });
    }
    body[0..8].copy_from_slice(&msg.timestamp.0.to_le_bytes());
    body[8..12].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    body[HEADER_LEN..needed].copy_from_slice(&payload);
    Ok(msg.body.msg_type())
}

/// Encodes `msg` into a fresh `slot_size` block with the owner bit clear.
pub fn encode(msg: &WireMessage, slot_size: usize) -> Result<Vec<u8>, CodecError> {
    if slot_size <= HEADER_LEN {
        return Err(CodecError::BlockTooSmall(slot_size));
    }
    let mut block = vec![0u8; slot_size];
    let ty = encode_body(msg, &mut block[..slot_size - 1])?;
    block[slot_size - 1] = ty.code();
    Ok(block)
}

/// Decodes a full slot block. The owner bit is ignored.
pub fn decode(block: &[u8]) -> Result<WireMessage, CodecError> {
    let Some((&meta, body)) = block.split_last() else {
        return Err(CodecError::BlockTooSmall(0));
    };
    decode_parts(meta & TYPE_MASK, body)
}

/// Decodes from a type code and the slot bytes preceding the metadata byte.
pub fn decode_parts(type_code: u8, body: &[u8]) -> Result<WireMessage, CodecError> {
    let ty = MsgType::from_code(type_code).ok_or(CodecError::UnknownType(type_code))?;
    if body.len() < HEADER_LEN {
        return Err(CodecError::BlockTooSmall(body.len() + 1));
    }
    let timestamp = SimTime(u64::from_le_bytes(body[0..8].try_into().unwrap()));
    let declared = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let capacity = body.len() - HEADER_LEN;
    if declared > capacity {
        return Err(CodecError::TruncatedPayload { declared, capacity });
    }
    let payload = &body[HEADER_LEN..HEADER_LEN + declared];
    Ok(WireMessage { timestamp, body: decode_payload(ty, payload)? })
}

struct Reader<'a> {
    ty: MsgType,
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(malformed(self.ty, "payload too short"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn opt_data(&mut self) -> Result<Option<Vec<u8>>, CodecError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(std::mem::take(&mut self.buf).to_vec())),
            _ => Err(malformed(self.ty, "bad data-present flag")),
        }
    }

    fn finish(self) -> Result<(), CodecError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(malformed(self.ty, "trailing bytes"))
        }
    }
}

fn decode_payload(ty: MsgType, payload: &[u8]) -> Result<Message, CodecError> {
    let mut r = Reader { ty, buf: payload };
    let msg = match ty {
        MsgType::Sync => Message::Sync,
        MsgType::InitDev => {
            let pci_vendor_id = r.u16()?;
            let pci_device_id = r.u16()?;
            let pci_class = r.u8()?;
            let pci_subclass = r.u8()?;
            let pci_revision = r.u8()?;
            let nbars = r.u8()? as usize;
            if nbars > MAX_BARS {
                return Err(malformed(ty, "more than 6 BARs"));
            }
            let mut bars = Vec::with_capacity(nbars);
            for _ in 0..nbars {
                let size = r.u64()?;
                if size != 0 && !size.is_power_of_two() {
                    return Err(malformed(ty, "BAR size not a power of two"));
                }
                let kind = match r.u8()? {
                    0 => BarKind::Mmio,
                    1 => BarKind::Dummy,
                    _ => return Err(malformed(ty, "unknown BAR kind")),
                };
                bars.push(Bar { size, kind });
            }
            let num_msi_vectors = r.u16()?;
            let num_msix_vectors = r.u16()?;
            let msix_table = BarOffset { bar: r.u8()?, offset: r.u64()? };
            let msix_pba = BarOffset { bar: r.u8()?, offset: r.u64()? };
            Message::Device(DeviceMsg::InitDev(DeviceIntro {
                pci_vendor_id,
                pci_device_id,
                pci_class,
                pci_subclass,
                pci_revision,
                bars,
                num_msi_vectors,
                num_msix_vectors,
                msix_table,
                msix_pba,
            }))
        }
        MsgType::DmaRead => Message::Device(DeviceMsg::DmaRead {
            req_id: r.u64()?,
            addr: r.u64()?,
            len: r.u32()?,
        }),
        MsgType::DmaWrite => {
            let req_id = r.u64()?;
            let addr = r.u64()?;
            let len = r.u32()? as usize;
            let data = r.take(len)?.to_vec();
            Message::Device(DeviceMsg::DmaWrite { req_id, addr, data })
        }
        MsgType::MmioCompl => Message::Device(DeviceMsg::MmioCompl {
            req_id: r.u64()?,
            data: r.opt_data()?,
        }),
        MsgType::Interrupt => {
            let kind = match r.u8()? {
                0 => InterruptKind::Legacy,
                1 => InterruptKind::Msi,
                2 => InterruptKind::Msix,
                _ => return Err(malformed(ty, "unknown interrupt kind")),
            };
            Message::Device(DeviceMsg::Interrupt { kind, vector: r.u32()? })
        }
        MsgType::DmaCompl => Message::Host(HostMsg::DmaCompl {
            req_id: r.u64()?,
            data: r.opt_data()?,
        }),
        MsgType::MmioRead => {
            let req_id = r.u64()?;
            let bar = r.u8()?;
            let offset = r.u64()?;
            let len = r.u32()?;
            if !valid_mmio_len(len as usize) {
                return Err(malformed(ty, "length not 1, 2, 4 or 8"));
            }
            Message::Host(HostMsg::MmioRead { req_id, bar, offset, len })
        }
        MsgType::MmioWrite => {
            let req_id = r.u64()?;
            let bar = r.u8()?;
            let offset = r.u64()?;
            let len = r.u32()? as usize;
            if !valid_mmio_len(len) {
                return Err(malformed(ty, "length not 1, 2, 4 or 8"));
            }
            let data = r.take(len)?.to_vec();
            Message::Host(HostMsg::MmioWrite { req_id, bar, offset, data })
        }
        MsgType::IntStatus => {
            let flags = r.u8()?;
            if flags & !0x07 != 0 {
                return Err(malformed(ty, "reserved flag bits set"));
            }
            Message::Host(HostMsg::IntStatus {
                legacy: flags & 1 != 0,
                msi: flags & 2 != 0,
                msix: flags & 4 != 0,
            })
        }
        MsgType::Packet => {
            // Runt frames decode; switches drop and count them.
            let len = r.u16()? as usize;
            Message::Eth(EthMsg::Packet(r.take(len)?.to_vec()))
        }
    };
    r.finish()?;
    Ok(msg)
}
