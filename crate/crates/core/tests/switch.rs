use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use sbrk_core::net::{build_frame, MacAddr, Switch, SwitchConfig};
use sbrk_core::proto::{EthMsg, Message, SimTime};
use sbrk_core::sync::{Context, Effect, Model, PortId};

fn mac(i: u8) -> MacAddr {
    MacAddr([2, 0, 0, 0, 0, i])
}

fn frame(dst: MacAddr, src: MacAddr) -> Vec<u8> {
    build_frame(dst, src, 0x88b5, &[0xab], 64)
}

fn sw(ports: usize) -> Switch {
    Switch::new(SwitchConfig { ports, ..Default::default() })
}

fn inject(s: &mut Switch, now: u64, port: PortId, f: Vec<u8>) -> Vec<Effect> {
    let mut fx = Vec::new();
    s.on_message(&mut Context::new(SimTime(now), &mut fx), port, Message::Eth(EthMsg::Packet(f))).unwrap();
    fx
}

fn out_ports(fx: &[Effect]) -> Vec<PortId> {
    fx.iter()
        .filter_map(|e| match e {
            Effect::Send { port, msg: Message::Eth(EthMsg::Packet(_)) } => Some(*port),
            _ => None,
        })
        .collect()
}

#[test]
fn unknown_destination_floods() {
    let mut s = sw(4);
    assert_eq!(out_ports(&inject(&mut s, 0, 1, frame(mac(2), mac(1)))), vec![0, 2, 3]);
    assert_eq!(s.table().lookup(&mac(1)), Some(1));
}

#[test]
fn learned_destination_is_unicast() {
    let mut s = sw(4);
    inject(&mut s, 0, 3, frame(mac(1), mac(3)));
    assert_eq!(out_ports(&inject(&mut s, 1, 1, frame(mac(3), mac(1)))), vec![3]);
    assert_eq!(out_ports(&inject(&mut s, 2, 3, frame(mac(1), mac(3)))), vec![1]);
}

#[test]
fn broadcast_goes_everywhere_but_ingress() {
    let mut s = sw(3);
    inject(&mut s, 0, 2, frame(mac(1), mac(3)));
    assert_eq!(out_ports(&inject(&mut s, 1, 0, frame(MacAddr::BROADCAST, mac(1)))), vec![1, 2]);
    let multicast = MacAddr([0x01, 0, 0x5e, 0, 0, 1]);
    assert_eq!(out_ports(&inject(&mut s, 2, 1, frame(multicast, mac(2)))), vec![0, 2]);
}

#[test]
fn frames_back_to_ingress_are_filtered() {
    let mut s = sw(2);
    inject(&mut s, 0, 0, frame(mac(9), mac(1)));
    inject(&mut s, 0, 0, frame(mac(9), mac(2)));
    assert!(inject(&mut s, 1, 0, frame(mac(2), mac(1))).is_empty());
    assert_eq!(s.stats().filtered, 1);
}

#[test]
fn runts_are_counted_and_dropped() {
    let mut s = sw(2);
    assert!(inject(&mut s, 0, 0, vec![0xff; 13]).is_empty());
    assert!(inject(&mut s, 0, 1, Vec::new()).is_empty());
    assert_eq!(s.stats().runt, 2);
    assert!(s.table().is_empty());
    assert!(s.stats().balanced(0));
}

#[test]
fn moved_station_is_relearned() {
    let mut s = sw(3);
    inject(&mut s, 0, 0, frame(mac(9), mac(1)));
    inject(&mut s, 1, 2, frame(mac(9), mac(1)));
    assert_eq!(out_ports(&inject(&mut s, 2, 1, frame(mac(1), mac(5)))), vec![2]);
}

#[test]
fn full_table_floods_new_addresses() {
    let mut s = Switch::new(SwitchConfig { ports: 3, mac_capacity: 1, ..Default::default() });
    inject(&mut s, 0, 0, frame(mac(9), mac(1)));
    inject(&mut s, 0, 1, frame(mac(9), mac(2)));
    assert_eq!(s.table().len(), 1);
    assert_eq!(out_ports(&inject(&mut s, 1, 2, frame(mac(2), mac(3)))), vec![0, 1]);
    assert_eq!(out_ports(&inject(&mut s, 1, 2, frame(mac(1), mac(3)))), vec![0]);
}

#[test]
fn forward_delay_holds_frames_and_overflow_drops() {
    let mut s = Switch::new(SwitchConfig { ports: 2, queue_capacity: 2, forward_delay_ns: 50, ..Default::default() });
    let mut timers = Vec::new();
    for _ in 0..3 {
        for e in inject(&mut s, 10, 0, frame(mac(2), mac(1))) {
            match e {
                Effect::Timer { at, token } => timers.push((at, token)),
                other => panic!("{other:?}"),
            }
        }
    }
    assert_eq!(timers, vec![(SimTime(60), 1), (SimTime(60), 1)]);
    assert_eq!(s.stats().ports[1].drop, 1);
    assert!(s.stats().balanced(s.queued()));
    let mut fx = Vec::new();
    for (at, token) in timers {
        s.on_timer(&mut Context::new(at, &mut fx), token).unwrap();
    }
    assert_eq!(out_ports(&fx), vec![1, 1]);
    assert_eq!(s.queued(), 0);
    assert!(s.stats().balanced(0));
}

#[derive(Clone, Debug)]
struct Arrival {
    gap: u64,
    port: usize,
    src: u8,
    dst: Option<u8>,
    runt: bool,
}

fn arrival(ports: usize) -> impl Strategy<Value = Arrival> {
    (0u64..40, 0..ports, 0u8..6, proptest::option::weighted(0.8, 0u8..6), proptest::bool::weighted(0.05))
        .prop_map(|(gap, port, src, dst, runt)| Arrival { gap, port, src, dst, runt })
}

fn scenario() -> impl Strategy<Value = (SwitchConfig, Vec<Arrival>)> {
    (2usize..6, 1usize..5, 0u64..100, 1usize..8).prop_flat_map(|(ports, queue_capacity, delay, cap)| {
        let cfg = SwitchConfig { ports, mac_capacity: cap, queue_capacity, forward_delay_ns: delay };
        (Just(cfg), proptest::collection::vec(arrival(ports), 1..200))
    })
}

proptest! {
    #[test]
    fn every_frame_is_accounted_for((cfg, arrivals) in scenario()) {
        let mut s = Switch::new(cfg);
        let mut timers: BTreeMap<(SimTime, u64), usize> = BTreeMap::new();
        let mut seq = 0u64;
        let mut sent: HashMap<Vec<u8>, u64> = HashMap::new();
        let mut injected: HashMap<Vec<u8>, u64> = HashMap::new();
        let mut now = 0;
        let mut handle = |fx: Vec<Effect>, timers: &mut BTreeMap<(SimTime, u64), usize>, seq: &mut u64| {
            for e in fx {
                match e {
                    Effect::Send { port, msg: Message::Eth(EthMsg::Packet(f)) } => {
                        assert!(port < cfg.ports);
                        *sent.entry(f).or_default() += 1;
                    }
                    Effect::Timer { at, token } => {
                        timers.insert((at, *seq), token as usize);
                        *seq += 1;
                    }
                    other => panic!("{other:?}"),
                }
            }
        };
        for a in &arrivals {
            now += a.gap;
            while let Some((&(at, k), &port)) = timers.iter().next() {
                if at.0 > now {
                    break;
                }
                timers.remove(&(at, k));
                let mut fx = Vec::new();
                s.on_timer(&mut Context::new(at, &mut fx), port as u64).unwrap();
                handle(fx, &mut timers, &mut seq);
            }
            let f = if a.runt {
                vec![0u8; 10]
            } else {
                let dst = a.dst.map_or(MacAddr::BROADCAST, mac);
                build_frame(dst, mac(a.src), 0x88b5, &now.to_le_bytes(), 64)
            };
            *injected.entry(f.clone()).or_default() += 1;
            let fx = inject(&mut s, now, a.port, f);
            handle(fx, &mut timers, &mut seq);
            prop_assert!(s.stats().balanced(s.queued()));
            prop_assert_eq!(s.queued(), timers.len() as u64);
        }
        for ((at, _), port) in std::mem::take(&mut timers) {
            let mut fx = Vec::new();
            s.on_timer(&mut Context::new(at, &mut fx), port as u64).unwrap();
            handle(fx, &mut timers, &mut seq);
        }
        let st = s.stats();
        prop_assert_eq!(s.queued(), 0);
        prop_assert!(st.balanced(0));
        let rx: u64 = st.ports.iter().map(|p| p.rx).sum();
        prop_assert_eq!(rx, arrivals.len() as u64);
        let tx: u64 = st.ports.iter().map(|p| p.tx).sum();
        prop_assert_eq!(tx, sent.values().sum::<u64>());
        for f in sent.keys() {
            prop_assert!(injected.contains_key(f), "switch invented a frame");
        }
    }
}
