//! Shared-memory channels between component processes.
//!
//! A channel is a pair of SPSC queues in one shared-memory file, set up over
//! a named Unix socket: the listener creates and sizes the file, then sends a
//! [`HandshakeRecord`] naming it; the connector maps it. Afterwards the socket
//! carries no data and only signals peer exit (EOF).

pub mod handshake;
pub mod queue;

use std::fs::{self, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::io::AsRawFd;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use memmap2::MmapMut;

use crate::proto::{self, ChannelParams, CodecError, WireMessage};
pub use handshake::{HandshakeRecord, Hello, RecordError, PROTOCOL_VERSION};
pub use queue::{heap_queue, Consumer, Producer, SlotReader, SlotWriter, WouldBlock};

use queue::Backing;

#[derive(Debug, thiserror::Error)]
pub enum ShmError {
    #[error("socket {0} is already in use")]
    AddressInUse(PathBuf),
    #[error("creating shared memory {path}: {source}")]
    ShmCreateFailed { path: PathBuf, source: io::Error },
    #[error("handshake version mismatch: ours {ours}, peer {theirs}")]
    HandshakeVersionMismatch { ours: u32, theirs: u32 },
    #[error("connecting to {path}: {source}")]
    ConnectFailed { path: PathBuf, source: io::Error },
    #[error("mapping shared memory {path}: {source}")]
    MapFailed { path: PathBuf, source: io::Error },
    #[error("bad handshake: {0}")]
    BadHandshake(RecordError),
    #[error("invalid channel parameters: {0}")]
    BadParams(#[from] proto::ParamsError),
    #[error("socket i/o: {0}")]
    Io(#[from] io::Error),
}

impl From<RecordError> for ShmError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::Version { ours, theirs } => ShmError::HandshakeVersionMismatch { ours, theirs },
            other => ShmError::BadHandshake(other),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("peer closed the channel")]
    PeerClosed,
}

struct MmapBacking {
    map: MmapMut,
    base: *mut u8,
}

// SAFETY: access goes through queue handles that synchronize via owner bytes.
unsafe impl Send for MmapBacking {}
unsafe impl Sync for MmapBacking {}

impl Backing for MmapBacking {
    fn base(&self) -> *mut u8 {
        self.base
    }
    fn size(&self) -> usize {
        self.map.len()
    }
}

fn map_file(path: &Path, expected_len: usize) -> io::Result<Arc<dyn Backing>> {
    let file = OpenOptions::new().read(true).write(true).open(path)?;
    let len = file.metadata()?.len() as usize;
    if len != expected_len {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("file is {len} bytes, expected {expected_len}"),
        ));
    }
    // SAFETY: the file is private to the two channel ends, which only access
    // it through the queue protocol.
    let mut map = unsafe { MmapMut::map_mut(&file)? };
    if map[..8] != handshake::SHM_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad shared-memory magic"));
    }
    let base = map.as_mut_ptr();
    Ok(Arc::new(MmapBacking { map, base }))
}

/// Checks whether the peer behind a handshake socket has exited.
#[derive(Debug)]
pub struct Canary {
    stream: UnixStream,
}

impl Canary {
    fn new(stream: UnixStream) -> io::Result<Self> {
        Ok(Canary { stream })
    }

    /// False once the peer closed its end of the socket.
    pub fn peer_alive(&self) -> bool {
        let mut b = [0u8; 1];
        // SAFETY: valid fd and a one-byte buffer.
        let n = unsafe {
            libc::recv(
                self.stream.as_raw_fd(),
                b.as_mut_ptr().cast(),
                1,
                libc::MSG_PEEK | libc::MSG_DONTWAIT,
            )
        };
        match n {
            0 => false,
            n if n > 0 => true,
            _ => matches!(io::Error::last_os_error().kind(), io::ErrorKind::WouldBlock | io::ErrorKind::Interrupted),
        }
    }
}

/// One side of an established channel.
#[derive(Debug)]
pub struct ChannelEndpoint {
    pub tx: Producer,
    pub rx: Consumer,
    pub params: ChannelParams,
    pub peer_name: String,
    canary: Canary,
}

const SEND_CHECK: Duration = Duration::from_millis(100);

impl ChannelEndpoint {
    /// Encodes `msg` into the next tx slot, waiting for space. Fails only if
    /// the message does not fit or the peer went away while the queue was full.
    pub fn send(&mut self, msg: &WireMessage) -> Result<(), ChannelError> {
        loop {
            match self.tx.alloc_timeout(SEND_CHECK) {
                Ok(mut slot) => {
                    let ty = proto::encode_body(msg, slot.body())?;
                    slot.enqueue(ty.code());
                    return Ok(());
                }
                Err(WouldBlock) => {
                    if !self.canary.peer_alive() {
                        return Err(ChannelError::PeerClosed);
                    }
                }
            }
        }
    }

    /// Decodes and releases the next rx message, if one is ready.
    pub fn try_recv(&mut self) -> Result<Option<WireMessage>, CodecError> {
        match self.rx.poll() {
            Some(slot) => {
                let msg = proto::decode_parts(slot.type_code(), slot.body());
                slot.release();
                msg.map(Some)
            }
            None => Ok(None),
        }
    }

    pub fn peer_alive(&self) -> bool {
        self.canary.peer_alive()
    }

    pub fn split(self) -> (Producer, Consumer, Canary) {
        (self.tx, self.rx, self.canary)
    }
}

/// A bound but not yet accepted channel socket.
#[derive(Debug)]
pub struct Listener {
    sock: UnixListener,
    path: PathBuf,
    params: ChannelParams,
    version: u32,
}

impl Listener {
    pub fn bind(path: impl AsRef<Path>, params: ChannelParams) -> Result<Listener, ShmError> {
        params.validate()?;
        let path = path.as_ref().to_path_buf();
        let sock = UnixListener::bind(&path).map_err(|e| match e.kind() {
            io::ErrorKind::AddrInUse => ShmError::AddressInUse(path.clone()),
            _ => ShmError::Io(e),
        })?;
        Ok(Listener { sock, path, params, version: PROTOCOL_VERSION })
    }

    /// Advertise a different protocol version (for exercising mismatch handling).
    #[doc(hidden)]
    pub fn with_protocol_version(mut self, version: u32) -> Self {
        self.version = version;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    /// Default location of the shared-memory file for this socket.
    pub fn default_shm_path(&self) -> PathBuf {
        shm_path_for(&self.path)
    }

    /// Waits for the peer, creates the shared-memory file and sends the record.
    /// The returned endpoint produces into queue A and consumes queue B.
    pub fn accept(self, shm_path: impl AsRef<Path>) -> Result<ChannelEndpoint, ShmError> {
        let shm_path = shm_path.as_ref();
        let (mut stream, _) = self.sock.accept()?;
        let mut hello = [0u8; handshake::HELLO_LEN];
        stream.read_exact(&mut hello)?;
        let hello = Hello::decode(&hello)?;
        if hello.version != self.version {
            // Still answer so the connector reports the mismatch too.
            let mut record = HandshakeRecord::new(self.params, String::new());
            record.version = self.version;
            let _ = stream.write_all(&record.encode()?);
            return Err(ShmError::HandshakeVersionMismatch { ours: self.version, theirs: hello.version });
        }

        let len = handshake::shm_file_len(&self.params);
        let create = || -> io::Result<()> {
            let mut f = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(shm_path)?;
            f.set_len(len as u64)?;
            f.write_all(&handshake::shm_header(&self.params))?;
            Ok(())
        };
        create().map_err(|source| ShmError::ShmCreateFailed { path: shm_path.into(), source })?;
        let backing = map_file(shm_path, len)
            .map_err(|source| ShmError::MapFailed { path: shm_path.into(), source })?;

        let mut record = HandshakeRecord::new(self.params, shm_path.to_string_lossy().into_owned());
        record.version = self.version;
        stream.write_all(&record.encode()?)?;

        let (tx, _) = queue::queue_pair(
            backing.clone(),
            record.queue_a_offset as usize,
            self.params.slot_size_bytes as usize,
            self.params.queue_len_slots as usize,
        );
        let (_, rx) = queue::queue_pair(
            backing,
            record.queue_b_offset as usize,
            self.params.slot_size_bytes as usize,
            self.params.queue_len_slots as usize,
        );
        Ok(ChannelEndpoint {
            tx,
            rx,
            params: self.params,
            peer_name: self.path.to_string_lossy().into_owned(),
            canary: Canary::new(stream)?,
        })
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn shm_path_for(socket_path: &Path) -> PathBuf {
    let mut s = socket_path.as_os_str().to_owned();
    s.push(".shm");
    PathBuf::from(s)
}

/// Binds `socket_path`, waits for one peer and returns the listener's endpoint.
pub fn listen(socket_path: impl AsRef<Path>, params: ChannelParams) -> Result<ChannelEndpoint, ShmError> {
    let l = Listener::bind(socket_path, params)?;
    let shm = l.default_shm_path();
    l.accept(shm)
}

/// A connected socket whose handshake record has not been read yet.
#[derive(Debug)]
pub struct PendingConnect {
    stream: UnixStream,
    path: PathBuf,
}

impl PendingConnect {
    /// Connects and sends the hello. Does not wait for the listener to accept.
    pub fn start(path: impl AsRef<Path>) -> Result<PendingConnect, ShmError> {
        let path = path.as_ref().to_path_buf();
        let mut stream = UnixStream::connect(&path)
            .map_err(|source| ShmError::ConnectFailed { path: path.clone(), source })?;
        stream.write_all(&Hello { version: PROTOCOL_VERSION }.encode())?;
        Ok(PendingConnect { stream, path })
    }

    /// Like [`PendingConnect::start`] but retries until the socket exists or
    /// `timeout` passes.
    pub fn start_retrying(path: impl AsRef<Path>, timeout: Duration) -> Result<PendingConnect, ShmError> {
        let deadline = Instant::now() + timeout;
        loop {
            match PendingConnect::start(path.as_ref()) {
                Ok(p) => return Ok(p),
                Err(ShmError::ConnectFailed { .. }) if Instant::now() < deadline => {
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Reads the record and maps the channel. The returned endpoint produces
    /// into queue B and consumes queue A.
    pub fn finish(mut self) -> Result<ChannelEndpoint, ShmError> {
        let mut buf = [0u8; handshake::RECORD_LEN];
        self.stream.read_exact(&mut buf)?;
        let record = HandshakeRecord::decode(&buf)?;
        let p = record.params;
        let shm_path = PathBuf::from(&record.shm_path);
        let backing = map_file(&shm_path, handshake::shm_file_len(&p))
            .map_err(|source| ShmError::MapFailed { path: shm_path.clone(), source })?;
        let (_, rx) = queue::queue_pair(
            backing.clone(),
            record.queue_a_offset as usize,
            p.slot_size_bytes as usize,
            p.queue_len_slots as usize,
        );
        let (tx, _) = queue::queue_pair(
            backing,
            record.queue_b_offset as usize,
            p.slot_size_bytes as usize,
            p.queue_len_slots as usize,
        );
        Ok(ChannelEndpoint {
            tx,
            rx,
            params: p,
            peer_name: self.path.to_string_lossy().into_owned(),
            canary: Canary::new(self.stream)?,
        })
    }
}

/// Connects to a listening peer and completes the handshake.
pub fn connect(socket_path: impl AsRef<Path>) -> Result<ChannelEndpoint, ShmError> {
    PendingConnect::start(socket_path)?.finish()
}
