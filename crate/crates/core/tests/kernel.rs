use std::thread;

use proptest::prelude::*;
use sbrk_core::proto::{ChannelParams, EthMsg, Message, SimTime, WireMessage};
use sbrk_core::sync::{
    local_pair, Context, Kernel, LocalEndpoint, Model, ModelError, PortId, SyncError, Transport,
};
use sbrk_core::trace::{self, Direction, TraceOptions, Tracer};

fn params(latency: u64, interval: u64) -> ChannelParams {
    ChannelParams { link_latency_ns: latency, sync_interval_ns: interval, ..Default::default() }
}

fn frame(tag: u8) -> Message {
    let mut f = vec![0u8; 60];
    f[0] = tag;
    Message::Eth(EthMsg::Packet(f))
}

/// Sends scripted packets from timers and notes every reception.
#[derive(Default)]
struct Script {
    sends: Vec<(u64, PortId, u8)>,
    marks: Vec<u64>,
    log: Vec<String>,
}

impl Model for Script {
    fn start(&mut self, cx: &mut Context<'_>) -> Result<(), ModelError> {
        for (i, (t, _, _)) in self.sends.iter().enumerate() {
            cx.timer_at(SimTime(*t), i as u64);
        }
        for (i, t) in self.marks.iter().enumerate() {
            cx.timer_at(SimTime(*t), 1_000_000 + i as u64);
        }
        Ok(())
    }

    fn on_message(&mut self, cx: &mut Context<'_>, port: PortId, msg: Message) -> Result<(), ModelError> {
        if let Message::Eth(EthMsg::Packet(f)) = &msg {
            self.log.push(format!("{} rx p{} #{}", cx.now(), port, f[0]));
        }
        Ok(())
    }

    fn on_timer(&mut self, cx: &mut Context<'_>, token: u64) -> Result<(), ModelError> {
        if token >= 1_000_000 {
            self.log.push(format!("{} mark", cx.now()));
            cx.note("MARK", vec![]);
        } else {
            let (_, port, tag) = self.sends[token as usize];
            cx.send(port, frame(tag));
        }
        Ok(())
    }
}

fn opts() -> TraceOptions {
    TraceOptions { include_sync: true, dump_payload: false }
}

fn run_pair(a: Script, b: Script, p: ChannelParams, until: u64) -> ((Script, Tracer), (Script, Tracer)) {
    let (ea, eb) = local_pair(&p);
    let spawn = |name: &'static str, m: Script, e: LocalEndpoint| {
        thread::spawn(move || {
            let mut k = Kernel::new(m, Tracer::memory(name, opts()));
            k.attach_peer("eth", p, e).unwrap();
            k.run(SimTime(until)).unwrap();
            k.into_parts()
        })
    };
    let ta = spawn("a", a, ea);
    let tb = spawn("b", b, eb);
    (ta.join().unwrap(), tb.join().unwrap())
}

fn rx_syncs(t: &Tracer) -> usize {
    trace::parse(&t.text()).unwrap().iter().filter(|r| r.is_sync() && r.dir == Direction::Rx).count()
}

#[test]
fn idle_pair_sync_cadence() {
    // Deliveries at latency + m*interval strictly before `until`.
    let oracle = |latency: u64, interval: u64, until: u64| (0..).take_while(|m| latency + m * interval < until).count();
    assert_eq!(oracle(500, 500, 10_000), 19);
    for (lat, int, until) in [(500, 500, 10_000), (500, 250, 10_000), (300, 300, 7_000)] {
        let ((_, ta), (_, tb)) = run_pair(Script::default(), Script::default(), params(lat, int), until);
        assert_eq!(rx_syncs(&ta), oracle(lat, int, until), "{lat}/{int}/{until}");
        assert_eq!(rx_syncs(&tb), oracle(lat, int, until));
    }
}

#[test]
fn inbound_interleaves_with_local_events() {
    let a = Script { marks: vec![1400, 1600], ..Default::default() };
    let b = Script { sends: vec![(1000, 0, 7)], ..Default::default() };
    let ((a, _), _) = run_pair(a, b, params(500, 500), 5000);
    assert_eq!(a.log, vec!["1400 mark", "1500 rx p0 #7", "1600 mark"]);
}

#[test]
fn local_runs_before_inbound_at_equal_time() {
    let a = Script { marks: vec![1500], ..Default::default() };
    let b = Script { sends: vec![(1000, 0, 1)], ..Default::default() };
    let ((a, _), _) = run_pair(a, b, params(500, 500), 5000);
    assert_eq!(a.log, vec!["1500 mark", "1500 rx p0 #1"]);
}

#[test]
fn same_time_sends_keep_queue_order() {
    let b = Script { sends: vec![(1000, 0, 1), (1000, 0, 2), (1000, 0, 3)], ..Default::default() };
    let ((a, _), _) = run_pair(Script::default(), b, params(500, 500), 5000);
    assert_eq!(a.log, vec!["1500 rx p0 #1", "1500 rx p0 #2", "1500 rx p0 #3"]);
}

/// Drives the far side of a channel by hand.
fn raw_peer(
    p: ChannelParams,
    script: Vec<WireMessage>,
) -> (LocalEndpoint, thread::JoinHandle<Vec<WireMessage>>) {
    let (mine, mut theirs) = local_pair(&p);
    let h = thread::spawn(move || {
        for m in &script {
            theirs.send(m).unwrap();
        }
        let mut seen = Vec::new();
        loop {
            match theirs.try_recv().unwrap() {
                Some(m) if m.timestamp == SimTime::MAX => break,
                Some(m) => seen.push(m),
                None => thread::yield_now(),
            }
        }
        theirs.send(&WireMessage::new(SimTime::MAX, Message::Sync)).unwrap();
        seen
    });
    (mine, h)
}

#[test]
fn send_stamps_and_sync_timer() {
    let p = params(500, 500);
    let (ep, peer) = raw_peer(p, vec![WireMessage::new(SimTime(5000), Message::Sync)]);
    let mut k = Kernel::new(Script { sends: vec![(1000, 0, 9)], ..Default::default() }, Tracer::off("k"));
    k.attach_peer("eth", p, ep).unwrap();
    k.run(SimTime(3000)).unwrap();
    let seen: Vec<(u64, bool)> = peer.join().unwrap().iter().map(|m| (m.timestamp.0, m.body.is_sync())).collect();
    assert_eq!(
        seen,
        vec![(500, true), (1000, true), (1500, true), (1500, false), (2000, true), (2500, true), (3000, true)]
    );
}

#[test]
fn decreasing_timestamp_is_causality_violation() {
    let p = params(500, 500);
    let script = vec![
        WireMessage::new(SimTime(1000), Message::Sync),
        WireMessage::new(SimTime(900), frame(0)),
    ];
    let (ep, _peer) = raw_peer(p, script);
    let mut k = Kernel::new(Script::default(), Tracer::off("k"));
    k.attach_peer("eth", p, ep).unwrap();
    match k.run(SimTime(10_000)) {
        Err(SyncError::CausalityViolation { timestamp, horizon, .. }) => {
            assert_eq!((timestamp, horizon), (SimTime(900), SimTime(1000)));
        }
        other => panic!("expected causality violation, got {other:?}"),
    }
}

#[test]
fn attach_after_run_rejected() {
    let mut k = Kernel::new(Script::default(), Tracer::off("k"));
    k.run(SimTime(100)).unwrap();
    let (e, _other) = local_pair(&params(500, 500));
    assert!(matches!(k.attach_peer("x", params(500, 500), e), Err(SyncError::AttachAfterStart)));
}

#[test]
fn vanished_peer_is_reported() {
    let p = params(500, 500);
    let (ep, other) = local_pair(&p);
    drop(other);
    let mut k = Kernel::new(Script::default(), Tracer::off("k"));
    k.attach_peer("eth", p, ep).unwrap();
    assert!(matches!(k.run(SimTime(10_000)), Err(SyncError::PeerLost { .. })));
}

#[test]
fn equal_time_inbound_ordered_by_port() {
    let p = params(500, 500);
    let (c0, a0) = local_pair(&p);
    let (c1, b1) = local_pair(&p);
    let one = |name: &'static str, tag: u8, e: LocalEndpoint| {
        thread::spawn(move || {
            let mut k = Kernel::new(Script { sends: vec![(1000, 0, tag)], ..Default::default() }, Tracer::off(name));
            k.attach_peer("eth", p, e).unwrap();
            k.run(SimTime(4000)).unwrap();
        })
    };
    let ta = one("a", 10, a0);
    let tb = one("b", 20, b1);
    let mut k = Kernel::new(Script::default(), Tracer::off("c"));
    k.attach_peer("p0", p, c0).unwrap();
    k.attach_peer("p1", p, c1).unwrap();
    k.run(SimTime(4000)).unwrap();
    ta.join().unwrap();
    tb.join().unwrap();
    assert_eq!(k.model().log, vec!["1500 rx p0 #10", "1500 rx p1 #20"]);
}

#[test]
fn unsynchronized_channel_sends_no_sync() {
    let p = ChannelParams { synchronized: false, ..params(500, 500) };
    let b = Script { sends: vec![(100, 0, 1)], ..Default::default() };
    let ((_, ta), (_, tb)) = run_pair(Script::default(), b, p, 10_000);
    for t in [&ta, &tb] {
        assert!(trace::parse(&t.text()).unwrap().iter().all(|r| !r.is_sync()));
    }
}

fn audit_pair(a: &Tracer, b: &Tracer, latency: u64, until: u64) {
    let ra = trace::parse(&a.text()).unwrap();
    let rb = trace::parse(&b.text()).unwrap();
    let pick = |v: &[trace::TraceRecord], d| v.iter().filter(|r| r.dir == d && !r.is_sync()).cloned().collect::<Vec<_>>();
    for (tx, rx) in [(&ra, &rb), (&rb, &ra)] {
        trace::audit_latency("eth", &pick(tx, Direction::Tx), &pick(rx, Direction::Rx), SimTime(latency), SimTime(until))
            .unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, .. ProptestConfig::default() })]

    #[test]
    fn every_message_arrives_exactly_one_latency_later(
        latency in 1u64..2000,
        div in 1u64..4,
        sa in proptest::collection::vec((0u64..20_000, any::<u8>()), 0..40),
        sb in proptest::collection::vec((0u64..20_000, any::<u8>()), 0..40),
    ) {
        let interval = (latency / div).max(1);
        let until = 20_000;
        let mk = |v: &Vec<(u64, u8)>| Script { sends: v.iter().map(|&(t, g)| (t, 0, g)).collect(), ..Default::default() };
        let p = params(latency, interval);
        let ((ma, ta), (mb, tb)) = run_pair(mk(&sa), mk(&sb), p, until);
        audit_pair(&ta, &tb, latency, until);
        // Replaying gives the same traces.
        let ((_, ta2), (_, tb2)) = run_pair(mk(&sa), mk(&sb), p, until);
        prop_assert_eq!(ta.text(), ta2.text());
        prop_assert_eq!(tb.text(), tb2.text());
        let expected = |v: &Vec<(u64, u8)>| v.iter().filter(|(t, _)| t + latency < until).count();
        prop_assert_eq!(mb.log.len(), expected(&sa));
        prop_assert_eq!(ma.log.len(), expected(&sb));
    }
}
