use proptest::prelude::*;
use sbrk_core::proto::SimTime;
use sbrk_core::trace::*;

#[derive(Clone, Debug)]
struct Rec {
    t: u64,
    channel: String,
    dir: Direction,
    ty: &'static str,
    payload: Vec<u8>,
}

fn rec() -> impl Strategy<Value = Rec> {
    (
        0u64..50,
        "[a-z][a-z0-9]{0,4}",
        prop_oneof![Just(Direction::Tx), Just(Direction::Rx), Just(Direction::Local)],
        prop_oneof![Just("SYNC"), Just("PACKET"), Just("DMA_READ"), Just("RTT")],
        proptest::collection::vec(any::<u8>(), 0..20),
    )
        .prop_map(|(t, channel, dir, ty, payload)| Rec { t, channel, dir, ty, payload })
}

/// Records in nondecreasing time order, as a kernel emits them.
fn recorded(recs: &mut [Rec], opts: TraceOptions) -> Tracer {
    recs.sort_by_key(|r| r.t);
    let mut tr = Tracer::memory("c0", opts);
    for r in recs.iter() {
        tr.record(SimTime(r.t), &r.channel, r.dir, r.ty, &r.payload).unwrap();
    }
    tr
}

proptest! {
    #[test]
    fn canonical_form_is_a_fixed_point(mut recs in proptest::collection::vec(rec(), 0..60), strict: bool, dump: bool) {
        let tr = recorded(&mut recs, TraceOptions { include_sync: true, dump_payload: dump });
        let once = canonicalize(&tr.text(), strict).unwrap();
        prop_assert_eq!(canonicalize(&once, strict).unwrap(), once.clone());
        prop_assert_eq!(canonicalize(&once, true).unwrap(), once.clone());
        prop_assert!(!once.contains("pl="));
        if !strict {
            prop_assert!(!once.contains("ty=SYNC"));
        }
    }

    #[test]
    fn line_order_does_not_matter(mut recs in proptest::collection::vec(rec(), 0..60), seed: u64) {
        let tr = recorded(&mut recs, TraceOptions { include_sync: true, dump_payload: false });
        let mut lines: Vec<_> = tr.lines().to_vec();
        let mut s = seed | 1;
        for i in (1..lines.len()).rev() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            lines.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let shuffled = lines.join("\n");
        prop_assert_eq!(canonicalize(&shuffled, true).unwrap(), canonicalize(&tr.text(), true).unwrap());
    }

    #[test]
    fn sync_records_are_numbered_even_when_not_written(mut recs in proptest::collection::vec(rec(), 0..60)) {
        let all = recorded(&mut recs.clone(), TraceOptions { include_sync: true, dump_payload: false });
        let some = recorded(&mut recs, TraceOptions::default());
        prop_assert_eq!(canonicalize(&all.text(), false).unwrap(), canonicalize(&some.text(), false).unwrap());
    }

    #[test]
    fn records_parse_back(mut recs in proptest::collection::vec(rec(), 1..30)) {
        let tr = recorded(&mut recs, TraceOptions { include_sync: true, dump_payload: true });
        let parsed = parse(&tr.text()).unwrap();
        prop_assert_eq!(parsed.len(), recs.len());
        for (i, (p, r)) in parsed.iter().zip(&recs).enumerate() {
            prop_assert_eq!(p.t, SimTime(r.t));
            prop_assert_eq!(&p.channel, &r.channel);
            prop_assert_eq!(p.dir, r.dir);
            prop_assert_eq!(p.digest, fnv1a64(&r.payload));
            prop_assert_eq!(p.seq, i as u64);
        }
    }

    #[test]
    fn arbitrary_lines_never_panic(line in "\\PC{0,120}") {
        let _ = parse_line(&line, 1);
    }

    #[test]
    fn exact_latency_passes_and_any_skew_fails(
        times in proptest::collection::vec(0u64..10_000, 1..40),
        latency in 1u64..1000,
        skew_at in any::<prop::sample::Index>(),
        skew in prop_oneof![-5i64..0, 1i64..6],
    ) {
        let mk = |t: u64, dir, i: usize| TraceRecord {
            t: SimTime(t),
            component: "x".into(),
            channel: "p".into(),
            dir,
            ty: "PACKET".into(),
            digest: i as u64,
            seq: i as u64,
        };
        let mut times = times;
        times.sort();
        let sent: Vec<_> = times.iter().enumerate().map(|(i, &t)| mk(t, Direction::Tx, i)).collect();
        let mut rx: Vec<_> = times.iter().enumerate().map(|(i, &t)| mk(t + latency, Direction::Rx, i)).collect();
        let until = SimTime(u64::MAX);
        prop_assert_eq!(audit_latency("p", &sent, &rx, SimTime(latency), until), Ok(sent.len()));
        let k = skew_at.index(rx.len());
        rx[k].t = SimTime((rx[k].t.0 as i64 + skew) as u64);
        let v = audit_latency("p", &sent, &rx, SimTime(latency), until).unwrap_err();
        let only_k = matches!(&v[..], [AuditViolation::Latency { index, .. }] if *index == k);
        prop_assert!(only_k);
    }
}

#[test]
fn lost_messages_before_the_end_are_violations() {
    let mk = |t: u64, dir, i: u64| TraceRecord {
        t: SimTime(t),
        component: "x".into(),
        channel: "p".into(),
        dir,
        ty: "PACKET".into(),
        digest: i,
        seq: i,
    };
    let sent = vec![mk(0, Direction::Tx, 0), mk(100, Direction::Tx, 1), mk(600, Direction::Tx, 2)];
    let rx = vec![mk(500, Direction::Rx, 0)];
    let v = audit_latency("p", &sent, &rx, SimTime(500), SimTime(1000)).unwrap_err();
    assert_eq!(v, vec![AuditViolation::Lost { channel: "p".into(), index: 1, sent: SimTime(100) }]);
    let phantom = audit_latency("p", &[], &rx, SimTime(500), SimTime(1000)).unwrap_err();
    assert!(matches!(phantom[..], [AuditViolation::Phantom { index: 0, .. }]));
    let wrong = vec![TraceRecord { digest: 9, ..rx[0].clone() }];
    let m = audit_latency("p", &sent[..1], &wrong, SimTime(500), SimTime(1000)).unwrap_err();
    assert!(matches!(m[..], [AuditViolation::Mismatch { index: 0, .. }]));
}
