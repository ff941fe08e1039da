//! Ethernet-side components: a learning switch and a packet generator/sink.

pub mod pktgen;
pub mod switch;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use pktgen::{Pktgen, PktgenConfig, PktgenError};
pub use switch::{MacTable, Switch, SwitchConfig, SwitchStats};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const BROADCAST: MacAddr = MacAddr([0xff; 6]);

    /// Group bit set (broadcast or multicast).
    pub fn is_group(&self) -> bool {
        self.0[0] & 1 != 0
    }

    /// Low 48 bits of a little-endian register value.
    pub fn to_u64(self) -> u64 {
        let mut b = [0u8; 8];
        b[..6].copy_from_slice(&self.0);
        u64::from_le_bytes(b)
    }

    pub fn from_u64(v: u64) -> MacAddr {
        let b = v.to_le_bytes();
        MacAddr([b[0], b[1], b[2], b[3], b[4], b[5]])
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", b[0], b[1], b[2], b[3], b[4], b[5])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid MAC address {0:?}")]
pub struct BadMac(pub String);

impl FromStr for MacAddr {
    type Err = BadMac;

    fn from_str(s: &str) -> Result<Self, BadMac> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for b in out.iter_mut() {
            let p = parts.next().filter(|p| p.len() == 2).ok_or_else(|| BadMac(s.into()))?;
            *b = u8::from_str_radix(p, 16).map_err(|_| BadMac(s.into()))?;
        }
        if parts.next().is_some() {
            return Err(BadMac(s.into()));
        }
        Ok(MacAddr(out))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const ETH_HEADER_LEN: usize = 14;

pub fn frame_dst(frame: &[u8]) -> Option<MacAddr> {
    frame.get(0..6).map(|b| MacAddr(b.try_into().unwrap()))
}

pub fn frame_src(frame: &[u8]) -> Option<MacAddr> {
    frame.get(6..12).map(|b| MacAddr(b.try_into().unwrap()))
}

pub fn frame_ethertype(frame: &[u8]) -> Option<u16> {
    frame.get(12..14).map(|b| u16::from_be_bytes([b[0], b[1]]))
}

/// Frame of `len` bytes (at least the header) with zero padding.
pub fn build_frame(dst: MacAddr, src: MacAddr, ethertype: u16, body: &[u8], len: usize) -> Vec<u8> {
    let mut f = Vec::with_capacity(len.max(ETH_HEADER_LEN + body.len()));
    f.extend_from_slice(&dst.0);
    f.extend_from_slice(&src.0);
    f.extend_from_slice(&ethertype.to_be_bytes());
    f.extend_from_slice(body);
    if f.len() < len {
        f.resize(len, 0);
    }
    f
}
