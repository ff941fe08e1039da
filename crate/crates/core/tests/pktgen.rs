use sbrk_core::net::{build_frame, MacAddr, Pktgen, PktgenConfig, PktgenError};
use sbrk_core::net::pktgen::PKTGEN_ETHERTYPE;
use sbrk_core::proto::{EthMsg, Message, SimTime};
use sbrk_core::sync::{Context, Effect, Model};

fn cfg(rate_pps: u64, duration_ns: u64) -> PktgenConfig {
    PktgenConfig {
        mac: MacAddr([2, 0, 0, 0, 0, 1]),
        dst: Some(MacAddr([2, 0, 0, 0, 0, 2])),
        rate_pps,
        duration_ns,
        frame_len: 64,
    }
}

/// Fires the generator's timers in order and returns the send times.
fn drive(g: &mut Pktgen) -> Vec<u64> {
    let mut fx = Vec::new();
    g.start(&mut Context::new(SimTime::ZERO, &mut fx)).unwrap();
    let mut sends = Vec::new();
    while let Some(e) = fx.pop() {
        match e {
            Effect::Timer { at, token } => {
                let mut next = Vec::new();
                g.on_timer(&mut Context::new(at, &mut next), token).unwrap();
                for e in &next {
                    if let Effect::Send { msg: Message::Eth(EthMsg::Packet(f)), .. } = e {
                        assert_eq!(f.len(), 64);
                        sends.push(at.0);
                    }
                }
                fx.extend(next.into_iter().filter(|e| matches!(e, Effect::Timer { .. })));
            }
            other => panic!("{other:?}"),
        }
    }
    sends
}

#[test]
fn one_mpps_for_a_millisecond_is_a_thousand_frames() {
    let c = cfg(1_000_000, 1_000_000);
    assert_eq!(c.frame_count().unwrap(), 1000);
    let mut g = Pktgen::new(c).unwrap();
    let times = drive(&mut g);
    assert_eq!(times.len(), 1000);
    assert_eq!(g.sent(), 1000);
    assert!(times.iter().enumerate().all(|(k, &t)| t == (k as u64 + 1) * 1000));
}

#[test]
fn rates_must_divide_a_second() {
    assert_eq!(Pktgen::new(cfg(3, 1000)).unwrap_err(), PktgenError::PeriodNotIntegral(3));
    assert_eq!(cfg(7, 1000).frame_count(), Err(PktgenError::PeriodNotIntegral(7)));
}

#[test]
fn zero_rate_sends_nothing() {
    let mut g = Pktgen::new(PktgenConfig { dst: None, ..cfg(0, 1_000_000) }).unwrap();
    assert!(drive(&mut g).is_empty());
}

#[test]
fn config_errors() {
    assert_eq!(Pktgen::new(PktgenConfig { dst: None, ..cfg(1000, 1) }).unwrap_err(), PktgenError::NoDestination);
    assert_eq!(Pktgen::new(PktgenConfig { frame_len: 20, ..cfg(1000, 1) }).unwrap_err(), PktgenError::FrameTooShort(20));
}

#[test]
fn receive_side_tracks_latency_per_flow() {
    let mut g = Pktgen::new(cfg(0, 0)).unwrap();
    let me = MacAddr([2, 0, 0, 0, 0, 1]);
    let peer = MacAddr([2, 0, 0, 0, 0, 7]);
    let mut body = [0u8; 12];
    for (sent_at, now) in [(100u64, 350u64), (200, 900)] {
        body[4..].copy_from_slice(&sent_at.to_le_bytes());
        let f = build_frame(me, peer, PKTGEN_ETHERTYPE, &body, 64);
        let mut fx = Vec::new();
        g.on_message(&mut Context::new(SimTime(now), &mut fx), Pktgen::ETH, Message::Eth(EthMsg::Packet(f))).unwrap();
        assert!(matches!(&fx[..], [Effect::Note { label: "DELIVER", .. }]));
    }
    let other = build_frame(MacAddr([2, 0, 0, 0, 0, 3]), peer, PKTGEN_ETHERTYPE, &body, 64);
    let mut fx = Vec::new();
    g.on_message(&mut Context::new(SimTime(1000), &mut fx), Pktgen::ETH, Message::Eth(EthMsg::Packet(other))).unwrap();
    assert!(fx.is_empty());
    assert_eq!(g.received(), 2);
    let f = g.flows()[&peer];
    assert_eq!((f.rx, f.lat_min, f.lat_max), (2, 250, 700));
}
