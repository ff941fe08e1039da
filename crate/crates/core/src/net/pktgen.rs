//! Constant-rate packet generator that doubles as a sink.
//!
//! Generated frames carry ethertype 0x88b5, a u32 sequence number and the
//! u64 send time (both little-endian), so the receiving generator can
//! compute one-way latency per source.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{build_frame, frame_dst, frame_ethertype, frame_src, MacAddr, ETH_HEADER_LEN};
use crate::proto::{EthMsg, Message, SimTime};
use crate::sync::{Context, Model, ModelError, PortId};

pub const PKTGEN_ETHERTYPE: u16 = 0x88b5;
const BODY_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PktgenConfig {
    pub mac: MacAddr,
    #[serde(default)]
    pub dst: Option<MacAddr>,
    #[serde(default)]
    pub rate_pps: u64,
    /// Frames are sent at k * period for every k >= 1 with k * period <= duration.
    #[serde(default)]
    pub duration_ns: u64,
    #[serde(default = "default_frame_len")]
    pub frame_len: usize,
}

fn default_frame_len() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PktgenError {
    #[error("1e9 is not divisible by rate {0} pps")]
    PeriodNotIntegral(u64),
    #[error("frame length {0} is below {min}", min = ETH_HEADER_LEN + BODY_LEN)]
    FrameTooShort(usize),
    #[error("a non-zero rate needs a destination address")]
    NoDestination,
}

impl PktgenConfig {
    /// Inter-frame period in ns, or `None` for rate 0.
    pub fn period(&self) -> Result<Option<u64>, PktgenError> {
        if self.rate_pps == 0 {
            return Ok(None);
        }
        if 1_000_000_000 % self.rate_pps != 0 {
            return Err(PktgenError::PeriodNotIntegral(self.rate_pps));
        }
        Ok(Some(1_000_000_000 / self.rate_pps))
    }

    pub fn validate(&self) -> Result<(), PktgenError> {
        if self.frame_len < ETH_HEADER_LEN + BODY_LEN {
            return Err(PktgenError::FrameTooShort(self.frame_len));
        }
        if self.period()?.is_some() && self.dst.is_none() {
            return Err(PktgenError::NoDestination);
        }
        Ok(())
    }

    /// Number of frames this generator sends in total.
    pub fn frame_count(&self) -> Result<u64, PktgenError> {
        Ok(self.period()?.map_or(0, |p| self.duration_ns / p))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlowStats {
    pub rx: u64,
    pub lat_min: u64,
    pub lat_max: u64,
}

#[derive(Debug)]
pub struct Pktgen {
    cfg: PktgenConfig,
    period: Option<u64>,
    sent: u64,
    received: u64,
    foreign: u64,
    flows: BTreeMap<MacAddr, FlowStats>,
}

impl Pktgen {
    pub const ETH: PortId = 0;

    pub fn new(cfg: PktgenConfig) -> Result<Self, PktgenError> {
        cfg.validate()?;
        let period = cfg.period()?;
        Ok(Pktgen { cfg, period, sent: 0, received: 0, foreign: 0, flows: BTreeMap::new() })
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn flows(&self) -> &BTreeMap<MacAddr, FlowStats> {
        &self.flows
    }

    fn schedule_next(&self, cx: &mut Context<'_>) {
        if let Some(p) = self.period {
            let at = (self.sent + 1) * p;
            if at <= self.cfg.duration_ns {
                cx.timer_at(SimTime(at), 0);
            }
        }
    }
}

impl Model for Pktgen {
    fn start(&mut self, cx: &mut Context<'_>) -> Result<(), ModelError> {
        self.schedule_next(cx);
        Ok(())
    }

    fn on_message(&mut self, cx: &mut Context<'_>, _port: PortId, msg: Message) -> Result<(), ModelError> {
        let Message::Eth(EthMsg::Packet(frame)) = msg else {
            return Ok(());
        };
        let for_us = frame_dst(&frame).is_some_and(|d| d == self.cfg.mac || d.is_group());
        if !for_us || frame_ethertype(&frame) != Some(PKTGEN_ETHERTYPE) || frame.len() < ETH_HEADER_LEN + BODY_LEN {
            self.foreign += 1;
            return Ok(());
        }
        let sent_at = u64::from_le_bytes(frame[18..26].try_into().unwrap());
        let lat = cx.now().0.saturating_sub(sent_at);
        let src = frame_src(&frame).unwrap();
        let f = self.flows.entry(src).or_insert(FlowStats { rx: 0, lat_min: u64::MAX, lat_max: 0 });
        f.rx += 1;
        f.lat_min = f.lat_min.min(lat);
        f.lat_max = f.lat_max.max(lat);
        self.received += 1;
        cx.note("DELIVER", frame);
        Ok(())
    }

    fn on_timer(&mut self, cx: &mut Context<'_>, _token: u64) -> Result<(), ModelError> {
        let mut body = [0u8; BODY_LEN];
        body[..4].copy_from_slice(&(self.sent as u32).to_le_bytes());
        body[4..].copy_from_slice(&cx.now().0.to_le_bytes());
        let dst = self.cfg.dst.expect("validated");
        let frame = build_frame(dst, self.cfg.mac, PKTGEN_ETHERTYPE, &body, self.cfg.frame_len);
        cx.send(Self::ETH, Message::Eth(EthMsg::Packet(frame)));
        self.sent += 1;
        self.schedule_next(cx);
        Ok(())
    }

    fn report(&self) -> Vec<String> {
        let mut out = vec![format!("sent={}", self.sent), format!("received={}", self.received)];
        out.push(format!("foreign={}", self.foreign));
        for (src, f) in &self.flows {
            out.push(format!("flow={src} rx={} lat_min={} lat_max={}", f.rx, f.lat_min, f.lat_max));
        }
        out
    }
}
