//! Fixed binary records exchanged over the named socket during channel setup.

use crate::proto::ChannelParams;

pub const PROTOCOL_VERSION: u32 = 1;

/// Sent by the connecting side right after connect.
pub const HELLO_MAGIC: [u8; 8] = *b"SBRKHI\0\0";
pub const HELLO_LEN: usize = 16;

/// Sent by the listening side once the shared-memory file exists.
pub const RECORD_MAGIC: [u8; 8] = *b"SBRKHS\0\0";
pub const RECORD_LEN: usize = 512;
const PATH_OFFSET: usize = 64;
pub const MAX_SHM_PATH: usize = RECORD_LEN - PATH_OFFSET;

/// Magic at the start of every shared-memory file.
pub const SHM_MAGIC: [u8; 8] = *b"SBRK1\0\0\0";
pub const SHM_HEADER_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("bad magic")]
    BadMagic,
    #[error("record is {0} bytes, expected {1}")]
    BadLength(usize, usize),
    #[error("protocol version {theirs}, expected {ours}")]
    Version { ours: u32, theirs: u32 },
    #[error("shared-memory path is not valid UTF-8 or too long")]
    BadPath,
    #[error("invalid channel parameters: {0}")]
    BadParams(#[from] crate::proto::ParamsError),
    #[error("queue offsets do not match the parameters")]
    BadOffsets,
    #[error("unknown flag bits {0:#x}")]
    BadFlags(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub version: u32,
}

impl Hello {
    pub fn encode(&self) -> [u8; HELLO_LEN] {
        let mut b = [0u8; HELLO_LEN];
        b[..8].copy_from_slice(&HELLO_MAGIC);
        b[8..12].copy_from_slice(&self.version.to_le_bytes());
        b
    }

    pub fn decode(buf: &[u8]) -> Result<Hello, RecordError> {
        if buf.len() != HELLO_LEN {
            return Err(RecordError::BadLength(buf.len(), HELLO_LEN));
        }
        if buf[..8] != HELLO_MAGIC {
            return Err(RecordError::BadMagic);
        }
        Ok(Hello { version: u32::from_le_bytes(buf[8..12].try_into().unwrap()) })
    }
}

/// Everything the connecting side needs to map the channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeRecord {
    pub version: u32,
    pub params: ChannelParams,
    pub shm_path: String,
    pub queue_a_offset: u64,
    pub queue_b_offset: u64,
}

impl HandshakeRecord {
    pub fn new(params: ChannelParams, shm_path: String) -> Self {
        let (a, b) = queue_offsets(&params);
        HandshakeRecord {
            version: PROTOCOL_VERSION,
            params,
            shm_path,
            queue_a_offset: a as u64,
            queue_b_offset: b as u64,
        }
    }

    pub fn encode(&self) -> Result<[u8; RECORD_LEN], RecordError> {
        let path = self.shm_path.as_bytes();
        if path.len() > MAX_SHM_PATH {
            return Err(RecordError::BadPath);
        }
        let p = &self.params;
        let mut b = [0u8; RECORD_LEN];
        b[0..8].copy_from_slice(&RECORD_MAGIC);
        b[8..12].copy_from_slice(&self.version.to_le_bytes());
        b[12..16].copy_from_slice(&p.slot_size_bytes.to_le_bytes());
        b[16..20].copy_from_slice(&p.queue_len_slots.to_le_bytes());
        b[20..24].copy_from_slice(&(p.synchronized as u32).to_le_bytes());
        b[24..32].copy_from_slice(&p.link_latency_ns.to_le_bytes());
        b[32..40].copy_from_slice(&p.sync_interval_ns.to_le_bytes());
        b[40..48].copy_from_slice(&self.queue_a_offset.to_le_bytes());
        b[48..56].copy_from_slice(&self.queue_b_offset.to_le_bytes());
        b[56..58].copy_from_slice(&(path.len() as u16).to_le_bytes());
        b[PATH_OFFSET..PATH_OFFSET + path.len()].copy_from_slice(path);
        Ok(b)
    }

    /// Parses and validates a record. The version is checked against
    /// [`PROTOCOL_VERSION`] only after magic and length.
    pub fn decode(buf: &[u8]) -> Result<HandshakeRecord, RecordError> {
        if buf.len() != RECORD_LEN {
            return Err(RecordError::BadLength(buf.len(), RECORD_LEN));
        }
        if buf[0..8] != RECORD_MAGIC {
            return Err(RecordError::BadMagic);
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != PROTOCOL_VERSION {
            return Err(RecordError::Version { ours: PROTOCOL_VERSION, theirs: version });
        }
        let flags = u32_at(20);
        if flags > 1 {
            return Err(RecordError::BadFlags(flags));
        }
        let params = ChannelParams {
            slot_size_bytes: u32_at(12),
            queue_len_slots: u32_at(16),
            synchronized: flags == 1,
            link_latency_ns: u64_at(24),
            sync_interval_ns: u64_at(32),
        };
        params.validate()?;
        let path_len = u16::from_le_bytes(buf[56..58].try_into().unwrap()) as usize;
        if path_len > MAX_SHM_PATH {
            return Err(RecordError::BadPath);
        }
        let shm_path = std::str::from_utf8(&buf[PATH_OFFSET..PATH_OFFSET + path_len])
            .map_err(|_| RecordError::BadPath)?
            .to_string();
        let record = HandshakeRecord {
            version,
            params,
            shm_path,
            queue_a_offset: u64_at(40),
            queue_b_offset: u64_at(48),
        };
        let (a, b) = queue_offsets(&params);
        if record.queue_a_offset != a as u64 || record.queue_b_offset != b as u64 {
            return Err(RecordError::BadOffsets);
        }
        Ok(record)
    }
}

/// Byte offsets of the two queues in the shared-memory file.
pub fn queue_offsets(params: &ChannelParams) -> (usize, usize) {
    let qbytes = params.slot_size_bytes as usize * params.queue_len_slots as usize;
    (SHM_HEADER_LEN, SHM_HEADER_LEN + qbytes)
}

/// Total size of the shared-memory file: header plus two slot arrays.
pub fn shm_file_len(params: &ChannelParams) -> usize {
    let (_, b) = queue_offsets(params);
    b + params.slot_size_bytes as usize * params.queue_len_slots as usize
}

pub fn shm_header(params: &ChannelParams) -> [u8; SHM_HEADER_LEN] {
    let mut h = [0u8; SHM_HEADER_LEN];
    h[..8].copy_from_slice(&SHM_MAGIC);
    h[8..12].copy_from_slice(&params.slot_size_bytes.to_le_bytes());
    h[12..16].copy_from_slice(&params.queue_len_slots.to_le_bytes());
    h
}
