//! Splices one channel across a TCP connection.
//!
//! Each proxy terminates the shared-memory channel of its local component and
//! forwards raw slot contents (owner bit stripped) to its peer proxy. Whatever
//! is ready in the local queue goes out as one frame.
//!
//! Stream layout: an 8-byte preamble, 32 bytes of channel parameters from each
//! side, then frames of `count: u32, body_len: u32` followed by `count`
//! entries of `len: u32` and the slot bytes. A frame with `count = 0` ends the
//! stream.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use crate::backoff::Backoff;
use crate::proto::{ChannelParams, MsgType, HEADER_LEN, TYPE_MASK};
use crate::shmq::queue::{Consumer, Producer};
use crate::shmq::{Canary, ChannelEndpoint, Listener, PendingConnect, ShmError};

pub const PREAMBLE: [u8; 8] = *b"SBRKPX\x00\x01";
pub const PARAMS_LEN: usize = 32;
pub const FRAME_HEADER_LEN: usize = 8;
pub const MAX_FRAME: usize = 64 * 1024;

const CANARY_EVERY: Duration = Duration::from_millis(20);
const SEND_CHECK: Duration = Duration::from_millis(100);

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("local channel: {0}")]
    Shm(#[from] ShmError),
    #[error("peer did not send a valid preamble")]
    BadPreamble,
    #[error("channel parameters differ: ours {ours:?}, theirs {theirs:?}")]
    ParamMismatch { ours: ChannelParams, theirs: ChannelParams },
    #[error("slot size {0} does not fit in a frame")]
    SlotTooLarge(u32),
    #[error("frame body of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
    #[error("TCP connection closed without an end frame")]
    TcpClosed,
    #[error("local component went away before its end marker")]
    LocalPeerLost,
}

pub fn encode_params(p: &ChannelParams) -> [u8; PARAMS_LEN] {
    let mut b = [0u8; PARAMS_LEN];
    b[0..8].copy_from_slice(&p.link_latency_ns.to_le_bytes());
    b[8..16].copy_from_slice(&p.sync_interval_ns.to_le_bytes());
    b[16..20].copy_from_slice(&p.slot_size_bytes.to_le_bytes());
    b[20..24].copy_from_slice(&p.queue_len_slots.to_le_bytes());
    b[24] = p.synchronized as u8;
    b
}

pub fn decode_params(b: &[u8]) -> Result<ChannelParams, ProxyError> {
    if b.len() != PARAMS_LEN || b[24] > 1 || b[25..].iter().any(|&x| x != 0) {
        return Err(ProxyError::MalformedFrame("bad parameter block"));
    }
    Ok(ChannelParams {
        link_latency_ns: u64::from_le_bytes(b[0..8].try_into().unwrap()),
        sync_interval_ns: u64::from_le_bytes(b[8..16].try_into().unwrap()),
        slot_size_bytes: u32::from_le_bytes(b[16..20].try_into().unwrap()),
        queue_len_slots: u32::from_le_bytes(b[20..24].try_into().unwrap()),
        synchronized: b[24] == 1,
    })
}

/// Appends one frame holding `entries` to `out`.
pub fn encode_frame<'a>(entries: impl IntoIterator<Item = &'a [u8]>, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&[0; FRAME_HEADER_LEN]);
    let mut count = 0u32;
    for e in entries {
        out.extend_from_slice(&(e.len() as u32).to_le_bytes());
        out.extend_from_slice(e);
        count += 1;
    }
    let body_len = (out.len() - start - FRAME_HEADER_LEN) as u32;
    out[start..start + 4].copy_from_slice(&count.to_le_bytes());
    out[start + 4..start + 8].copy_from_slice(&body_len.to_le_bytes());
}

/// Reads `(count, body_len)` and checks the size limit.
pub fn decode_frame_header(h: &[u8; FRAME_HEADER_LEN]) -> Result<(u32, usize), ProxyError> {
    let count = u32::from_le_bytes(h[0..4].try_into().unwrap());
    let body_len = u32::from_le_bytes(h[4..8].try_into().unwrap()) as usize;
    if body_len > MAX_FRAME - FRAME_HEADER_LEN {
        return Err(ProxyError::FrameTooLarge(body_len));
    }
    if count == 0 && body_len != 0 {
        return Err(ProxyError::MalformedFrame("end frame with a body"));
    }
    Ok((count, body_len))
}

/// Splits a frame body into slot entries, each checked against `slot_size`:
/// a header, a payload of the advertised length and a known type byte.
pub fn decode_frame_body(count: u32, body: &[u8], slot_size: usize) -> Result<Vec<&[u8]>, ProxyError> {
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    let mut rest = body;
    for _ in 0..count {
        if rest.len() < 4 {
            return Err(ProxyError::MalformedFrame("truncated entry length"));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        rest = &rest[4..];
        if len > rest.len() {
            return Err(ProxyError::MalformedFrame("truncated entry"));
        }
        let (entry, tail) = rest.split_at(len);
        check_entry(entry, slot_size)?;
        out.push(entry);
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(ProxyError::MalformedFrame("trailing bytes"));
    }
    Ok(out)
}

fn check_entry(entry: &[u8], slot_size: usize) -> Result<(), ProxyError> {
    if entry.len() < HEADER_LEN + 1 || entry.len() > slot_size {
        return Err(ProxyError::MalformedFrame("entry size"));
    }
    let plen = u32::from_le_bytes(entry[8..12].try_into().unwrap()) as usize;
    if HEADER_LEN + plen + 1 != entry.len() {
        return Err(ProxyError::MalformedFrame("payload length"));
    }
    let ty = entry[entry.len() - 1];
    if ty & !TYPE_MASK != 0 || MsgType::from_code(ty).is_none() {
        return Err(ProxyError::MalformedFrame("type byte"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TcpRole {
    Listen(String),
    Connect(String),
}

/// Role of the proxy on the local socket; the component takes the other one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChanRole {
    Listen,
    Connect,
}

#[derive(Clone, Debug)]
pub struct ProxyOptions {
    pub tcp: TcpRole,
    pub chan: PathBuf,
    pub chan_role: ChanRole,
    pub params: ChannelParams,
    /// How long to retry connecting, on either side.
    pub connect_timeout: Duration,
    /// Touched once both sides are established.
    pub ready_file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DirectionStats {
    pub frames: u64,
    pub messages: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProxyStats {
    pub to_tcp: DirectionStats,
    pub from_tcp: DirectionStats,
}

fn connect_tcp(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
    }
}

/// Sends the preamble and our parameters, then checks the peer's.
pub fn exchange_params(stream: &mut TcpStream, ours: &ChannelParams) -> Result<(), ProxyError> {
    let mut hello = Vec::with_capacity(PREAMBLE.len() + PARAMS_LEN);
    hello.extend_from_slice(&PREAMBLE);
    hello.extend_from_slice(&encode_params(ours));
    stream.write_all(&hello)?;
    let mut buf = [0u8; PREAMBLE.len() + PARAMS_LEN];
    stream.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProxyError::BadPreamble,
        _ => ProxyError::Io(e),
    })?;
    if buf[..8] != PREAMBLE {
        return Err(ProxyError::BadPreamble);
    }
    let theirs = decode_params(&buf[8..])?;
    if theirs != *ours {
        return Err(ProxyError::ParamMismatch { ours: *ours, theirs });
    }
    Ok(())
}

/// Establishes both sides of the proxy and forwards until the channel ends.
pub fn run(opts: &ProxyOptions) -> Result<ProxyStats, ProxyError> {
    opts.params.validate().map_err(ShmError::from)?;
    if opts.params.slot_size_bytes as usize + 4 > MAX_FRAME - FRAME_HEADER_LEN {
        return Err(ProxyError::SlotTooLarge(opts.params.slot_size_bytes));
    }
    enum Local {
        Listening(Listener),
        Connecting(PendingConnect),
    }
    let local = match opts.chan_role {
        ChanRole::Listen => Local::Listening(Listener::bind(&opts.chan, opts.params)?),
        ChanRole::Connect => Local::Connecting(PendingConnect::start_retrying(&opts.chan, opts.connect_timeout)?),
    };
    let mut tcp = match &opts.tcp {
        TcpRole::Listen(addr) => TcpListener::bind(addr)?.accept()?.0,
        TcpRole::Connect(addr) => connect_tcp(addr, opts.connect_timeout)?,
    };
    tcp.set_nodelay(true)?;
    exchange_params(&mut tcp, &opts.params)?;
    let ep = match local {
        Local::Listening(l) => {
            let shm = l.default_shm_path();
            l.accept(shm)?
        }
        Local::Connecting(c) => c.finish()?,
    };
    if ep.params != opts.params {
        return Err(ProxyError::ParamMismatch { ours: opts.params, theirs: ep.params });
    }
    if let Some(f) = &opts.ready_file {
        std::fs::write(f, b"ready\n")?;
    }
    forward(ep, tcp)
}

/// Runs the two forwarding directions until both have seen the end of the
/// stream. Returns as soon as either fails.
pub fn forward(ep: ChannelEndpoint, tcp: TcpStream) -> Result<ProxyStats, ProxyError> {
    let slot_size = ep.params.slot_size_bytes as usize;
    let (tx, rx, canary) = ep.split();
    let canary = Arc::new(canary);
    let tcp_out = tcp.try_clone()?;
    let (done_tx, done_rx) = mpsc::channel();

    let c = canary.clone();
    let d = done_tx.clone();
    thread::Builder::new().name("shm-to-tcp".into()).spawn(move || {
        let _ = d.send(shm_to_tcp(rx, &c, tcp_out).map(|s| (true, s)));
    })?;
    thread::Builder::new().name("tcp-to-shm".into()).spawn(move || {
        let _ = done_tx.send(tcp_to_shm(tx, &canary, tcp, slot_size).map(|s| (false, s)));
    })?;

    let mut stats = ProxyStats::default();
    for _ in 0..2 {
        let (outbound, s) = done_rx.recv().expect("forwarding thread vanished")?;
        if outbound {
            stats.to_tcp = s;
        } else {
            stats.from_tcp = s;
        }
    }
    Ok(stats)
}

fn shm_to_tcp(mut rx: Consumer, canary: &Canary, mut tcp: TcpStream) -> Result<DirectionStats, ProxyError> {
    let slot_size = rx.slot_size();
    let mut stats = DirectionStats::default();
    let mut buf = Vec::with_capacity(MAX_FRAME);
    let mut backoff = Backoff::new();
    let mut last_check = Instant::now();
    loop {
        buf.clear();
        buf.extend_from_slice(&[0; FRAME_HEADER_LEN]);
        let mut count = 0u32;
        let mut ended = false;
        while !ended && buf.len() + 4 + slot_size <= MAX_FRAME {
            let Some(slot) = rx.poll() else { break };
            let body = slot.body();
            let plen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
            let used = HEADER_LEN + plen;
            if used > body.len() {
                return Err(ProxyError::MalformedFrame("local slot payload length"));
            }
            ended = slot.type_code() == MsgType::Sync.code() && body[..8] == [0xff; 8];
            buf.extend_from_slice(&(used as u32 + 1).to_le_bytes());
            buf.extend_from_slice(&body[..used]);
            buf.push(slot.type_code());
            count += 1;
        }
        if count > 0 {
            let body_len = (buf.len() - FRAME_HEADER_LEN) as u32;
            buf[0..4].copy_from_slice(&count.to_le_bytes());
            buf[4..8].copy_from_slice(&body_len.to_le_bytes());
            tcp.write_all(&buf)?;
            stats.frames += 1;
            stats.messages += count as u64;
            backoff.reset();
            if ended {
                tcp.write_all(&[0; FRAME_HEADER_LEN])?;
                let _ = tcp.shutdown(Shutdown::Write);
                return Ok(stats);
            }
            continue;
        }
        backoff.snooze();
        if last_check.elapsed() >= CANARY_EVERY {
            last_check = Instant::now();
            if !canary.peer_alive() && !rx.ready() {
                return Err(ProxyError::LocalPeerLost);
            }
        }
    }
}

fn tcp_to_shm(
    mut tx: Producer,
    canary: &Canary,
    mut tcp: TcpStream,
    slot_size: usize,
) -> Result<DirectionStats, ProxyError> {
    let mut stats = DirectionStats::default();
    let mut body = vec![0u8; MAX_FRAME];
    loop {
        let mut h = [0u8; FRAME_HEADER_LEN];
        tcp.read_exact(&mut h).map_err(eof_is_closed)?;
        let (count, len) = decode_frame_header(&h)?;
        if count == 0 {
            return Ok(stats);
        }
        tcp.read_exact(&mut body[..len]).map_err(eof_is_closed)?;
        for entry in decode_frame_body(count, &body[..len], slot_size)? {
            let mut slot = loop {
                match tx.alloc_timeout(SEND_CHECK) {
                    Ok(s) => break s,
                    Err(_) if !canary.peer_alive() => return Err(ProxyError::LocalPeerLost),
                    Err(_) => {}
                }
            };
            let n = entry.len() - 1;
            slot.body()[..n].copy_from_slice(&entry[..n]);
            slot.enqueue(entry[n]);
        }
        stats.frames += 1;
        stats.messages += count as u64;
    }
}

fn eof_is_closed(e: io::Error) -> ProxyError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset => ProxyError::TcpClosed,
        _ => ProxyError::Io(e),
    }
}
